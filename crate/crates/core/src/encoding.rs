//! Linear task encodings.
//!
//! A reward `r` is represented by the coefficients `z = C⁻¹ φᵀ K r` of its
//! `K`-orthogonal projection onto the span of the features, where
//! `C = φᵀ K φ`. Under a Gaussian prior with covariance `K⁻¹` the posterior
//! mean of `r` given `z` is `φ z`, and `z` itself is `N(0, C⁻¹)`.

use nalgebra::{Cholesky, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::mdp::RewardVector;
use crate::priors::MetricK;

/// Smallest singular value a feature matrix may have.
pub const INDEPENDENCE_TOL: f64 = 1e-8;

/// `n_states × d` feature matrix, column `j` is the feature `φ_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureDocument", into = "FeatureDocument")]
pub struct FeatureSet {
    phi: Mat,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureDocument {
    n_states: usize,
    d: usize,
    /// Row-major: `phi[s]` is the feature vector of state `s`.
    phi: Vec<Vec<f64>>,
}

impl TryFrom<FeatureDocument> for FeatureSet {
    type Error = Error;

    fn try_from(doc: FeatureDocument) -> Result<Self> {
        if doc.phi.len() != doc.n_states || doc.phi.iter().any(|row| row.len() != doc.d) {
            return Err(Error::Dimension(format!("feature table is not {} x {}", doc.n_states, doc.d)));
        }
        FeatureSet::new(linalg::rows_to_mat(&doc.phi)?)
    }
}

impl From<FeatureSet> for FeatureDocument {
    fn from(f: FeatureSet) -> Self {
        FeatureDocument { n_states: f.n_states(), d: f.d(), phi: linalg::mat_to_rows(&f.phi) }
    }
}

impl FeatureSet {
    pub fn new(phi: Mat) -> Result<Self> {
        if phi.ncols() == 0 || phi.ncols() > phi.nrows() {
            return Err(Error::Dimension(format!(
                "need 1 <= d <= n_states, got d = {} with {} states",
                phi.ncols(),
                phi.nrows()
            )));
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        let sigma = linalg::min_singular_value(&phi);
        if sigma <= INDEPENDENCE_TOL {
            return Err(Error::LinearDependence(sigma));
        }
        Ok(Self { phi })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(linalg::rows_to_mat(rows)?)
    }

    /// Random features with i.i.d. standard normal entries.
    pub fn random<R: Rng + ?Sized>(n_states: usize, d: usize, rng: &mut R) -> Result<Self> {
        Self::new(Mat::from_fn(n_states, d, |_, _| rng.sample(StandardNormal)))
    }

    pub fn matrix(&self) -> &Mat {
        &self.phi
    }

    pub fn into_matrix(self) -> Mat {
        self.phi
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn d(&self) -> usize {
        self.phi.ncols()
    }

    /// Feature vector `φ(s)`.
    pub fn state(&self, s: usize) -> Vector {
        self.phi.row(s).transpose()
    }

    /// `φ A` for an invertible `d × d` matrix `A`.
    pub fn reparameterize(&self, a: &Mat) -> Result<Self> {
        Self::new(&self.phi * a)
    }
}

/// `C = φᵀ K φ` with cached Cholesky factor and inverse.
#[derive(Debug, Clone)]
pub struct FeatureCovariance {
    c: Mat,
    chol: Cholesky<f64, Dyn>,
    c_inv: Mat,
    /// `Lᵀ` of `C = L Lᵀ`, used for sampling codes.
    l_t: Mat,
}

impl FeatureCovariance {
    pub fn from_matrix(c: Mat) -> Result<Self> {
        if !c.is_square() {
            return Err(Error::Dimension("feature covariance must be square".into()));
        }
        let c = (&c + c.transpose()) * 0.5;
        let chol = Cholesky::new(c.clone()).ok_or_else(|| {
            let sigma = c.clone().symmetric_eigenvalues().min();
            Error::LinearDependence(sigma.max(0.0).sqrt())
        })?;
        let c_inv = chol.inverse();
        let l_t = chol.l().transpose();
        Ok(Self { c, chol, c_inv, l_t })
    }

    pub fn matrix(&self) -> &Mat {
        &self.c
    }

    pub fn inverse(&self) -> &Mat {
        &self.c_inv
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn solve(&self, b: &Vector) -> Vector {
        self.chol.solve(b)
    }

    /// `z ∼ N(0, C⁻¹)`.
    pub fn sample_task<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let xi = Vector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        self.whiten_inverse(&xi)
    }

    /// Maps a standard normal vector `ξ` to `L⁻ᵀ ξ ∼ N(0, C⁻¹)`.
    pub fn whiten_inverse(&self, xi: &Vector) -> Vector {
        self.l_t.solve_upper_triangular(xi).expect("Cholesky factor has a positive diagonal")
    }
}

pub fn covariance(phi: &FeatureSet, k: &MetricK) -> Result<FeatureCovariance> {
    check_shapes(phi, k)?;
    FeatureCovariance::from_matrix(phi.matrix().transpose() * k.matrix() * phi.matrix())
}

fn check_shapes(phi: &FeatureSet, k: &MetricK) -> Result<()> {
    if phi.n_states() != k.dim() {
        return Err(Error::Dimension(format!("features on {} states, metric on {}", phi.n_states(), k.dim())));
    }
    Ok(())
}

/// `z = C⁻¹ φᵀ K r`.
pub fn encode(r: &RewardVector, phi: &FeatureSet, k: &MetricK, c: &FeatureCovariance) -> Result<Vector> {
    check_shapes(phi, k)?;
    if r.len() != phi.n_states() {
        return Err(Error::Dimension("reward length differs from state count".into()));
    }
    let b = phi.matrix().transpose() * (k.matrix() * &**r);
    Ok(c.solve(&b))
}

/// `r_z = φ z`.
pub fn posterior_mean(z: &Vector, phi: &FeatureSet) -> RewardVector {
    RewardVector::new(phi.matrix() * z).expect("finite features and code")
}

pub fn sample_task<R: Rng + ?Sized>(c: &FeatureCovariance, rng: &mut R) -> Vector {
    c.sample_task(rng)
}

/// Conditional mean `E[r | A r = z]` for `r ∼ N(0, K⁻¹)` and
/// `A = C⁻¹ φᵀ K`, computed by generic Gaussian conditioning
/// `Σ Aᵀ (A Σ Aᵀ)⁻¹ z` with explicit matrices.
pub fn gaussian_conditioning_oracle(k: &MetricK, phi: &FeatureSet, z: &Vector) -> Result<Vector> {
    check_shapes(phi, k)?;
    let sigma = linalg::inverse(k.matrix(), "prior covariance")?;
    let c = phi.matrix().transpose() * k.matrix() * phi.matrix();
    let a = linalg::inverse(&c, "feature covariance")? * phi.matrix().transpose() * k.matrix();
    let cross = &sigma * a.transpose();
    let cov_z = &a * &cross;
    Ok(cross * linalg::solve(&cov_z, z, "code covariance")?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// `z = C⁻¹ φᵀ K r`.
    Projection,
    /// `z = φᵀ K r`, omitting the preconditioner. Only used to check that the
    /// verification suite notices a broken encoder.
    Unpreconditioned,
}

/// Features, metric and covariance bundled together.
#[derive(Debug, Clone)]
pub struct LinearEncoder {
    pub phi: FeatureSet,
    pub k: MetricK,
    pub cov: FeatureCovariance,
    pub mode: EncoderMode,
}

impl LinearEncoder {
    pub fn new(phi: FeatureSet, k: MetricK) -> Result<Self> {
        let cov = covariance(&phi, &k)?;
        Ok(Self { phi, k, cov, mode: EncoderMode::Projection })
    }

    pub fn with_mode(mut self, mode: EncoderMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn encode(&self, r: &RewardVector) -> Result<Vector> {
        match self.mode {
            EncoderMode::Projection => encode(r, &self.phi, &self.k, &self.cov),
            EncoderMode::Unpreconditioned => Ok(self.phi.matrix().transpose() * (self.k.matrix() * &**r)),
        }
    }

    pub fn posterior_mean(&self, z: &Vector) -> RewardVector {
        posterior_mean(z, &self.phi)
    }

    pub fn sample_task<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        self.cov.sample_task(rng)
    }

    pub fn d(&self) -> usize {
        self.phi.d()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::random_mdp;
    use crate::priors::MetricKind;
    use crate::rng::seeded;

    fn random_spd<R: Rng>(n: usize, rng: &mut R) -> MetricK {
        let b = Mat::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        MetricK::new(&b * b.transpose() + Mat::identity(n, n) * 0.5, MetricKind::Custom).unwrap()
    }

    #[test]
    fn white_noise_identity_features() {
        let k = MetricK::white_noise(&Vector::from_vec(vec![0.5, 0.5])).unwrap();
        let phi = FeatureSet::new(Mat::identity(2, 2)).unwrap();
        let c = covariance(&phi, &k).unwrap();
        assert_eq!(c.matrix(), &Mat::from_diagonal_element(2, 2, 0.5));
    }

    #[test]
    fn dependent_features_are_rejected() {
        let phi = Mat::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(FeatureSet::new(phi), Err(Error::LinearDependence(_))));
    }

    #[test]
    fn in_span_and_orthogonal_rewards() {
        let mut rng = seeded(3);
        let k = random_spd(5, &mut rng);
        let phi = FeatureSet::random(5, 2, &mut rng).unwrap();
        let c = covariance(&phi, &k).unwrap();
        let w = Vector::from_vec(vec![0.7, -1.3]);
        let z = encode(&posterior_mean(&w, &phi), &phi, &k, &c).unwrap();
        assert!((z - &w).amax() < 1e-10);

        // K-orthogonal complement: r = K⁻¹ v with φᵀ v = 0.
        let v0 = Vector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let proj = phi.matrix()
            * linalg::solve(&(phi.matrix().transpose() * phi.matrix()), &(phi.matrix().transpose() * &v0), "").unwrap();
        let v = v0 - proj;
        let r = RewardVector::new(k.covariance() * v).unwrap();
        assert!(encode(&r, &phi, &k, &c).unwrap().amax() < 1e-10);
    }

    #[test]
    fn white_noise_encoding_matches_successor_feature_formula() {
        let mut rng = seeded(12);
        let mdp = random_mdp(6, 2, 0.0, 0.9, &mut rng).unwrap().with_stationary_rho().unwrap();
        let rho = mdp.rho();
        let k = MetricK::white_noise(rho).unwrap();
        let phi = FeatureSet::random(6, 3, &mut rng).unwrap();
        let c = covariance(&phi, &k).unwrap();
        let r = RewardVector::new(Vector::from_fn(6, |_, _| rng.sample(StandardNormal))).unwrap();
        let mut cov = Mat::zeros(3, 3);
        let mut cross = Vector::zeros(3);
        for s in 0..6 {
            let f = phi.state(s);
            cov += &f * f.transpose() * rho[s];
            cross += &f * (rho[s] * r[s]);
        }
        let expected = linalg::solve(&cov, &cross, "").unwrap();
        assert!((encode(&r, &phi, &k, &c).unwrap() - expected).amax() < 1e-10);
    }

    #[test]
    fn conditioning_oracle_agrees_with_posterior_mean() {
        let mut rng = seeded(6);
        for _ in 0..10 {
            let k = random_spd(6, &mut rng);
            let phi = FeatureSet::random(6, 3, &mut rng).unwrap();
            let z = Vector::from_fn(3, |_, _| rng.sample(StandardNormal));
            let oracle = gaussian_conditioning_oracle(&k, &phi, &z).unwrap();
            assert!((oracle - &*posterior_mean(&z, &phi)).amax() < 1e-8);
        }
    }

    #[test]
    fn conditioning_oracle_full_rank_is_inverse_encoding() {
        let mut rng = seeded(7);
        let k = random_spd(4, &mut rng);
        let phi = FeatureSet::random(4, 4, &mut rng).unwrap();
        let c = covariance(&phi, &k).unwrap();
        let z = Vector::from_fn(4, |_, _| rng.sample(StandardNormal));
        let r = RewardVector::new(gaussian_conditioning_oracle(&k, &phi, &z).unwrap()).unwrap();
        assert!((encode(&r, &phi, &k, &c).unwrap() - z).amax() < 1e-9);
    }

    #[test]
    fn dirac_prior_posterior_is_not_the_projection() {
        // Goal-reaching prior with white-noise metric: z = C⁻¹ φ(g). With
        // injective one-dimensional features z identifies g, so the
        // conditional mean of r is the Dirac reward itself.
        let rho = Vector::from_element(5, 0.2);
        let k = MetricK::white_noise(&rho).unwrap();
        let phi = FeatureSet::new(Mat::from_column_slice(5, 1, &[1.0, 2.0, 3.0, -1.0, 0.5])).unwrap();
        let c = covariance(&phi, &k).unwrap();
        let mut rng = seeded(9);
        let target_goal = 2;
        let dirac = |g: usize| {
            let mut r = Vector::zeros(5);
            r[g] = 1.0 / rho[g];
            RewardVector::new(r).unwrap()
        };
        let z_star = encode(&dirac(target_goal), &phi, &k, &c).unwrap();
        let mut acc = Vector::zeros(5);
        let mut hits = 0;
        for _ in 0..2000 {
            let g = rng.random_range(0..5);
            let r = dirac(g);
            if (encode(&r, &phi, &k, &c).unwrap() - &z_star).amax() < 1e-12 {
                acc += &*r;
                hits += 1;
            }
        }
        assert!(hits > 0);
        let conditional = acc / hits as f64;
        assert!((&conditional - &*dirac(target_goal)).amax() < 1e-12);
        let projected = posterior_mean(&z_star, &phi);
        assert!((conditional - &*projected).amax() > 1.0);
    }

    #[test]
    fn reparameterization_leaves_projection_unchanged() {
        let mut rng = seeded(21);
        let k = random_spd(5, &mut rng);
        let phi = FeatureSet::random(5, 2, &mut rng).unwrap();
        let a = Mat::from_row_slice(2, 2, &[2.0, 1.0, -0.5, 1.5]);
        let phi_a = phi.reparameterize(&a).unwrap();
        let c = covariance(&phi, &k).unwrap();
        let c_a = covariance(&phi_a, &k).unwrap();
        let r = RewardVector::new(Vector::from_fn(5, |_, _| rng.sample(StandardNormal))).unwrap();
        let p1 = posterior_mean(&encode(&r, &phi, &k, &c).unwrap(), &phi);
        let p2 = posterior_mean(&encode(&r, &phi_a, &k, &c_a).unwrap(), &phi_a);
        assert!((&*p1 - &*p2).amax() < 1e-9);
    }

    #[test]
    fn feature_json_round_trip() {
        let phi = FeatureSet::random(4, 2, &mut seeded(2)).unwrap();
        let text = serde_json::to_string(&phi).unwrap();
        let back: FeatureSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, phi);
        assert!(serde_json::from_str::<FeatureSet>(r#"{"n_states":2,"d":1,"phi":[[0.0],[0.0]]}"#).is_err());
    }

    #[test]
    fn unpreconditioned_mode_differs() {
        let mut rng = seeded(5);
        let k = random_spd(4, &mut rng);
        let enc = LinearEncoder::new(FeatureSet::random(4, 2, &mut rng).unwrap(), k).unwrap();
        let r = RewardVector::new(Vector::from_fn(4, |_, _| rng.sample(StandardNormal))).unwrap();
        let a = enc.encode(&r).unwrap();
        let b = enc.clone().with_mode(EncoderMode::Unpreconditioned).encode(&r).unwrap();
        assert!((a - b).amax() > 1e-6);
    }
}
