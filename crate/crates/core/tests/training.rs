//! Trainer behaviour checked against independent optimal-policy oracles and
//! against the random orthonormal starting point.

use zsrl_core::encoding::LinearEncoder;
use zsrl_core::feature_opt::{train_features_gaussian, train_features_sparse, ComponentSpec, Trainer, TrainerConfig};
use zsrl_core::generators::{bandit, chain, random_mdp};
use zsrl_core::linalg::{Mat, Vector};
use zsrl_core::loss::{loss_direct, PolicyFamily};
use zsrl_core::mdp::{RewardVector, TabularMdp};
use zsrl_core::priors::{MetricK, Prior, ScatteredSpec};
use zsrl_core::rng::seeded;

fn config(d: usize, steps: usize) -> TrainerConfig {
    TrainerConfig { steps, eval_interval: steps / 2, ..TrainerConfig::new(d) }
}

fn white(mdp: &TabularMdp) -> MetricK {
    MetricK::white_noise(mdp.rho()).unwrap()
}

/// `-Σ_g ρ(g) max_π E_π[δ_g / ρ(g)]`, solved goal by goal.
fn goal_bound(mdp: &TabularMdp) -> f64 {
    let rho = mdp.rho();
    (0..mdp.n_states())
        .map(|g| {
            let r = RewardVector::new(Vector::from_fn(mdp.n_states(), |s, _| if s == g { 1.0 / rho[g] } else { 0.0 }))
                .unwrap();
            let (pi, _) = mdp.optimal_policy(&r).unwrap();
            -rho[g] * mdp.expected_return(&r, &pi).unwrap()
        })
        .sum()
}

#[test]
fn full_rank_gaussian_training_reaches_the_all_optimal_bound() {
    let mdp = random_mdp(4, 2, 0.0, 0.9, &mut seeded(20)).unwrap();
    let k = white(&mdp);
    let bundle = train_features_gaussian(&mdp, &k, &config(4, 400), &mut seeded(21)).unwrap();
    let enc = LinearEncoder::new(bundle.phi.clone(), k.clone()).unwrap();
    let bound = loss_direct(&mdp, &Prior::Gaussian(k), &enc, &PolicyFamily::sampled_oracle(), 40_000, 22).unwrap();
    let gap = (bundle.final_loss() - bound.value).abs();
    assert!(gap < 0.02 * bound.value.abs() + 3.0 * bound.standard_error, "{} vs {}", bundle.final_loss(), bound.value);
}

#[test]
fn identity_features_on_the_goal_prior_stay_at_the_per_goal_bound() {
    let mdp = random_mdp(4, 2, 0.0, 0.9, &mut seeded(23)).unwrap();
    let comps = vec![(1.0, ComponentSpec::Sparse(ScatteredSpec::goal_reaching()))];
    let mut rng = seeded(24);
    let mut trainer = Trainer::new(&mdp, white(&mdp), comps, config(4, 300), &mut rng).unwrap();
    trainer.set_phi(Mat::identity(4, 4)).unwrap();
    let bundle = trainer.run(&mut rng).unwrap();
    let bound = goal_bound(&mdp);
    assert!((bundle.initial_loss() - bound).abs() < 1e-9 * bound.abs(), "{} vs {bound}", bundle.initial_loss());
    assert!((bundle.final_loss() - bound).abs() < 0.02 * bound.abs(), "{} vs {bound}", bundle.final_loss());
}

#[test]
fn cycle2_goal_training_never_loses_to_its_start() {
    let mdp = chain(2, 0.9).unwrap();
    for seed in 0..10 {
        let bundle =
            train_features_sparse(&mdp, &ScatteredSpec::goal_reaching(), &config(1, 200), &mut seeded(seed)).unwrap();
        assert!(bundle.final_loss() <= bundle.initial_loss() + 1e-12, "seed {seed}");
    }
}

#[test]
fn mixture_training_beats_random_and_gaussian_features_on_the_mixture() {
    let mixture = || vec![(0.5, ComponentSpec::Gaussian), (0.5, ComponentSpec::Sparse(ScatteredSpec::goal_reaching()))];
    let mut wins = 0;
    for seed in 0..10u64 {
        let mdp = random_mdp(5, 2, 0.0, 0.9, &mut seeded(100 + seed)).unwrap();
        let k = white(&mdp);
        let cfg = config(2, 2000);
        let mut rng = seeded(200 + seed);
        let mixed = Trainer::new(&mdp, k.clone(), mixture(), cfg.clone(), &mut rng).unwrap().run(&mut rng).unwrap();
        let gaussian = train_features_gaussian(&mdp, &k, &cfg, &mut seeded(300 + seed)).unwrap();
        let mut judge = Trainer::new(&mdp, k, mixture(), cfg, &mut seeded(0)).unwrap();
        judge.set_phi(gaussian.phi.into_matrix()).unwrap();
        let (_, gaussian_on_mixture) = judge.exact_losses().unwrap();
        if mixed.final_loss() < mixed.initial_loss() && mixed.final_loss() < gaussian_on_mixture {
            wins += 1;
        }
    }
    assert!(wins >= 8, "mixture-trained features won on {wins}/10 seeds");
}

#[test]
fn strong_orthonormality_keeps_the_covariance_near_identity() {
    for (label, mdp) in
        [("chain", chain(5, 0.9).unwrap()), ("random", random_mdp(5, 2, 0.0, 0.9, &mut seeded(30)).unwrap())]
    {
        let cfg = TrainerConfig { lambda_orth: 10.0, ..config(2, 2000) };
        let bundle = train_features_gaussian(&mdp, &white(&mdp), &cfg, &mut seeded(31)).unwrap();
        let residual = bundle.trace.last().unwrap().orth_residual;
        assert!(residual < 0.1, "{label}: ‖C − Id‖_F = {residual}");
    }
}

#[test]
fn inverse_covariance_correction_barely_moves_the_loss_under_orthonormality() {
    let mdp = random_mdp(5, 2, 0.0, 0.9, &mut seeded(40)).unwrap();
    let k = white(&mdp);
    let run = |lambda_c: f64| {
        let cfg = TrainerConfig { lambda_c, ..config(2, 2000) };
        train_features_gaussian(&mdp, &k, &cfg, &mut seeded(41)).unwrap().final_loss()
    };
    let (with, without) = (run(1.0), run(0.0));
    assert!((with - without).abs() < 0.01 * without.abs(), "{with} vs {without}");
}

#[test]
fn bandit3_with_strong_orthonormality_has_two_opposite_spikes() {
    let mdp = bandit(3, 0.9).unwrap();
    let cfg = TrainerConfig { lambda_orth: 10.0, ..config(1, 5000) };
    let bundle = train_features_gaussian(&mdp, &white(&mdp), &cfg, &mut seeded(50)).unwrap();
    let mut phi: Vec<f64> = bundle.phi.matrix().column(0).iter().copied().collect();
    phi.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    assert!(phi[0] * phi[1] < 0.0, "{phi:?}");
    assert!(phi[2].abs() < 0.05 * phi[0].abs(), "{phi:?}");
}
