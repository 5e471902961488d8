use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use zsrl_core::encoding::{covariance, encode, FeatureSet, LinearEncoder};
use zsrl_core::feature_opt::ema_covariance_update;
use zsrl_core::generators::{random_mdp, random_policy};
use zsrl_core::linalg::{sup_norm, Mat, Vector};
use zsrl_core::loss::policy_family_exact;
use zsrl_core::mdp::{RewardVector, TabularMdp};
use zsrl_core::occupancy::density_exact;
use zsrl_core::priors::{MetricK, Prior};
use zsrl_core::rng::seeded;
use zsrl_core::variance::{variance_penalized_loss, VariancePenaltyConfig};

fn instance(seed: u64, n: usize, a: usize, gamma: f64) -> TabularMdp {
    random_mdp(n, a, 0.0, gamma, &mut seeded(seed)).unwrap()
}

fn gaussian_vector(n: usize, seed: u64) -> Vector {
    let mut rng = seeded(seed);
    Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng))
}

fn metric(mdp: &TabularMdp, dirichlet: bool) -> MetricK {
    if dirichlet {
        MetricK::dirichlet(mdp, 0.5).unwrap()
    } else {
        MetricK::white_noise(mdp.rho()).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn occupancy_reproduces_expected_return(seed in any::<u64>(), n in 1usize..7, a in 1usize..4, gamma in 0.1f64..0.97) {
        let mdp = instance(seed, n, a, gamma);
        let pi = random_policy(n, a, &mut seeded(seed ^ 1));
        let r = RewardVector::new(gaussian_vector(n, seed ^ 2)).unwrap();
        let d = mdp.occupation_measure(&pi).unwrap().dist;
        let (v, _) = mdp.policy_value(&r, &pi).unwrap();
        let lhs = d.dot(&r);
        let rhs = (1.0 - gamma) * mdp.rho0().dot(&v);
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
        prop_assert!((d.sum() - 1.0).abs() < 1e-10);
        let density = density_exact(&mdp, &pi).unwrap();
        prop_assert!((density.dot(mdp.rho()) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn encoding_the_posterior_mean_returns_the_code(seed in any::<u64>(), n in 2usize..7, dirichlet in any::<bool>()) {
        let mdp = instance(seed, n, 2, 0.9);
        let k = metric(&mdp, dirichlet);
        let d = 1 + (seed as usize) % (n - 1);
        let phi = FeatureSet::random(n, d, &mut seeded(seed ^ 3)).unwrap();
        let c = covariance(&phi, &k).unwrap();
        let z = gaussian_vector(d, seed ^ 4);
        let r = RewardVector::new(phi.matrix() * &z).unwrap();
        let back = encode(&r, &phi, &k, &c).unwrap();
        prop_assert!((back - &z).amax() < 1e-8 * (1.0 + z.amax()));
    }

    #[test]
    fn reparameterized_features_give_the_same_posterior_mean_and_policy(seed in any::<u64>(), n in 3usize..7) {
        let mdp = instance(seed, n, 3, 0.9);
        let k = metric(&mdp, seed % 2 == 0);
        let phi = FeatureSet::random(n, 2, &mut seeded(seed ^ 5)).unwrap();
        let mut a = Mat::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let noise = gaussian_vector(4, seed ^ 6);
        for (entry, e) in a.iter_mut().zip(noise.iter()) {
            *entry += 0.4 * e;
        }
        prop_assume!(a.determinant().abs() > 0.1);
        let psi = phi.reparameterize(&a).unwrap();
        let enc_phi = LinearEncoder::new(phi, k.clone()).unwrap();
        let enc_psi = LinearEncoder::new(psi, k).unwrap();
        let r = RewardVector::new(gaussian_vector(n, seed ^ 7)).unwrap();
        let (z_phi, z_psi) = (enc_phi.encode(&r).unwrap(), enc_psi.encode(&r).unwrap());
        let (m_phi, m_psi) = (enc_phi.posterior_mean(&z_phi), enc_psi.posterior_mean(&z_psi));
        prop_assert!((m_phi.into_inner() - m_psi.into_inner()).amax() < 1e-8);
        let p_phi = policy_family_exact(&enc_phi.phi).policy(&mdp, &z_phi, None).unwrap();
        let p_psi = policy_family_exact(&enc_psi.phi).policy(&mdp, &z_psi, None).unwrap();
        let v_phi = mdp.expected_return(&r, &p_phi).unwrap();
        let v_psi = mdp.expected_return(&r, &p_psi).unwrap();
        prop_assert!((v_phi - v_psi).abs() < 1e-8, "{v_phi} vs {v_psi}");
    }

    #[test]
    fn greedy_policy_ignores_positive_reward_scale(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mdp = instance(seed, 5, 3, 0.85);
        let phi = FeatureSet::random(5, 2, &mut seeded(seed ^ 8)).unwrap();
        let enc = LinearEncoder::new(phi, MetricK::white_noise(mdp.rho()).unwrap()).unwrap();
        let r = RewardVector::new(gaussian_vector(5, seed ^ 9)).unwrap();
        let scaled = RewardVector::new(r.clone().into_inner() * scale).unwrap();
        let z = enc.encode(&r).unwrap();
        let zs = enc.encode(&scaled).unwrap();
        prop_assert!((&zs - &z * scale).amax() < 1e-9 * scale * (1.0 + z.amax()));
        let fam = policy_family_exact(&enc.phi);
        prop_assert!(fam.is_scale_invariant());
        let v = mdp.expected_return(&r, &fam.policy(&mdp, &z, None).unwrap()).unwrap();
        let vs = mdp.expected_return(&r, &fam.policy(&mdp, &zs, None).unwrap()).unwrap();
        prop_assert!((v - vs).abs() < 1e-9 * (1.0 + v.abs()));
    }

    #[test]
    fn ema_covariance_is_an_entrywise_convex_combination(seed in any::<u64>(), beta in 0.0f64..=1.0) {
        let mdp = instance(seed, 5, 2, 0.9);
        let k = MetricK::white_noise(mdp.rho()).unwrap();
        let phi = FeatureSet::random(5, 3, &mut seeded(seed ^ 10)).unwrap();
        let old = FeatureSet::random(5, 3, &mut seeded(seed ^ 11)).unwrap();
        let c_old = old.matrix().transpose() * k.matrix() * old.matrix();
        let fresh = phi.matrix().transpose() * k.matrix() * phi.matrix();
        let next = ema_covariance_update(&c_old, phi.matrix(), &k, beta).unwrap();
        for ((x, lo), hi) in next.iter().zip(c_old.iter()).zip(fresh.iter()) {
            let (lo, hi) = (lo.min(*hi), lo.max(*hi));
            prop_assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
        }
        let expected = &c_old * beta + &fresh * (1.0 - beta);
        prop_assert!(sup_norm(&(next - expected)) < 1e-12);
    }

    #[test]
    fn variance_penalty_is_monotone_in_lambda(seed in any::<u64>(), l1 in 0.0f64..5.0, extra in 0.0f64..5.0) {
        let mdp = instance(seed, 4, 2, 0.8);
        let k = MetricK::white_noise(mdp.rho()).unwrap();
        let phi = FeatureSet::random(4, 2, &mut seeded(seed ^ 12)).unwrap();
        let enc = LinearEncoder::new(phi, k.clone()).unwrap();
        let fam = policy_family_exact(&enc.phi);
        let prior = Prior::Gaussian(k);
        let run = |lambda: f64| {
            let cfg = VariancePenaltyConfig::new(lambda).unwrap();
            variance_penalized_loss(&mdp, &prior, &enc, &fam, &cfg, 64, seed).unwrap()
        };
        let (low, high) = (run(l1), run(l1 + extra));
        prop_assert!(high.estimate.value >= low.estimate.value - 1e-12);
        prop_assert!(low.variance >= 0.0);
        prop_assert_eq!(low.mean_loss.to_bits(), high.mean_loss.to_bits());
    }
}

#[test]
fn negative_penalty_weight_is_rejected() {
    assert!(VariancePenaltyConfig::new(-0.1).is_err());
    assert!(VariancePenaltyConfig::new(f64::NAN).is_err());
}
