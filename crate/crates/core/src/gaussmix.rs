//! Gaussian and Gaussian-mixture algebra.
//!
//! Densities are evaluated in the log domain through a Cholesky factor; mixture densities
//! combine components with a stable log-sum-exp.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, min_eigenvalue, psd_factor, symmetrize, Mat, Vector};

/// Symmetry and PSD tolerance for covariance inputs.
pub const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: Vector,
    cov: Mat,
}

impl Gaussian {
    /// Builds a Gaussian, symmetrizing the covariance.
    pub fn new(mean: Vector, cov: Mat) -> Result<Self> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(Error::dim(
                "Gaussian covariance",
                format!("{n}x{n}"),
                format!("{}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        let scale = cov.amax().max(1.0);
        let asym = (&cov - cov.transpose()).amax();
        if asym > PSD_TOLERANCE * scale {
            return Err(Error::Domain(format!(
                "covariance asymmetric by {asym:.3e}"
            )));
        }
        let cov = symmetrize(&cov);
        let min = min_eigenvalue(&cov);
        if min < -PSD_TOLERANCE * scale {
            return Err(Error::Domain(format!(
                "covariance not PSD (min eigenvalue {min:.3e})"
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &Mat {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &Vector) -> Result<f64> {
        Ok(LogDensity::new(self)?.eval(x))
    }

    pub fn pdf(&self, x: &Vector) -> Result<f64> {
        Ok(self.log_pdf(x)?.exp())
    }
}

/// Pre-factored Gaussian log-density, reused across many evaluation points.
#[derive(Debug, Clone)]
pub struct LogDensity {
    mean: Vector,
    chol: Mat,
    log_norm: f64,
}

impl LogDensity {
    pub fn new(g: &Gaussian) -> Result<Self> {
        let chol = cholesky_lower(&g.cov, "Gaussian covariance")
            .map_err(|_| Error::Numerical("singular covariance in density evaluation".into()))?;
        let log_det: f64 = chol.diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let n = g.dim() as f64;
        Ok(Self {
            mean: g.mean.clone(),
            chol,
            log_norm: -0.5 * (n * (2.0 * PI).ln() + log_det),
        })
    }

    /// Density of `g` with covariance eigenvalues raised to at least `floor`, for
    /// trajectories whose covariance may be numerically singular at some knots.
    pub fn floored(g: &Gaussian, floor: f64) -> Result<Self> {
        if min_eigenvalue(&g.cov) >= floor {
            return Self::new(g);
        }
        let eig = nalgebra::SymmetricEigen::new(g.cov.clone());
        let vals = eig.eigenvalues.map(|v| v.max(floor));
        let cov = &eig.eigenvectors * Mat::from_diagonal(&vals) * eig.eigenvectors.transpose();
        Self::new(&Gaussian::new(g.mean.clone(), symmetrize(&cov))?)
    }

    pub fn eval(&self, x: &Vector) -> f64 {
        let diff = x - &self.mean;
        let z = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if weights.len() != components.len() {
            return Err(Error::dim("mixture weights", components.len(), weights.len()));
        }
        let n = components[0].dim();
        if let Some((i, c)) = components.iter().enumerate().find(|(_, c)| c.dim() != n) {
            return Err(Error::dim(format!("mixture component {i}"), n, c.dim()));
        }
        if let Some(i) = weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!(
                "mixture weight {i} must be positive, got {}",
                weights[i]
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn single(g: Gaussian) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![g],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn mean(&self) -> Vector {
        self.weights
            .iter()
            .zip(&self.components)
            .fold(Vector::zeros(self.dim()), |acc, (w, c)| acc + c.mean() * *w)
    }

    /// Total covariance `Σ wᵢ (Σᵢ + μᵢμᵢᵀ) − μ̄μ̄ᵀ`.
    pub fn covariance(&self) -> Mat {
        let mean = self.mean();
        let n = self.dim();
        let second = self
            .weights
            .iter()
            .zip(&self.components)
            .fold(Mat::zeros(n, n), |acc, (w, c)| {
                acc + (c.cov() + c.mean() * c.mean().transpose()) * *w
            });
        symmetrize(&(second - &mean * mean.transpose()))
    }

    pub fn log_pdf(&self, x: &Vector) -> Result<f64> {
        let terms = self
            .weights
            .iter()
            .zip(&self.components)
            .enumerate()
            .map(|(i, (w, c))| {
                c.log_pdf(x)
                    .map(|lp| w.ln() + lp)
                    .map_err(|_| Error::Numerical(format!("mixture component {i} has a singular covariance")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(log_sum_exp(&terms))
    }

    /// Draws `count` points: categorical component index, then `μ + L z`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(count, &mut rng)
    }

    pub fn sample_with<R: rand::Rng>(&self, count: usize, rng: &mut R) -> Vec<Vector> {
        self.sample_labelled_with(count, rng)
            .into_iter()
            .map(|(_, x)| x)
            .collect()
    }

    /// Like [`GaussianMixture::sample_with`], also returning the component index of each draw.
    pub fn sample_labelled_with<R: rand::Rng>(&self, count: usize, rng: &mut R) -> Vec<(usize, Vector)> {
        let picker = WeightedIndex::new(&self.weights).expect("validated positive weights");
        let factors: Vec<Mat> = self.components.iter().map(|c| psd_factor(c.cov())).collect();
        let n = self.dim();
        (0..count)
            .map(|_| {
                let i = picker.sample(rng);
                let z = Vector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                (i, self.components[i].mean() + &factors[i] * z)
            })
            .collect()
    }
}

fn sym_solve(m: &Mat, rhs: &Mat, what: &str) -> Result<Mat> {
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))?;
    Ok(chol.solve(rhs))
}

fn log_det_spd(m: &Mat, what: &str) -> Result<f64> {
    let l = cholesky_lower(m, what)?;
    Ok(l.diagonal().iter().map(|d| 2.0 * d.ln()).sum())
}

/// `ρ₁ ρ₂ = c_p N(μ_p, Σ_p)` with `c_p = N(μ₁; μ₂, Σ₁ + Σ₂)`.
pub fn gaussian_product(g1: &Gaussian, g2: &Gaussian) -> Result<(f64, Gaussian)> {
    if g1.dim() != g2.dim() {
        return Err(Error::dim("Gaussian product", g1.dim(), g2.dim()));
    }
    let sum = g1.cov() + g2.cov();
    // Σ₁(Σ₁+Σ₂)⁻¹Σ₂ = (Σ₁⁻¹+Σ₂⁻¹)⁻¹, valid whenever the sum is PD.
    let sum_inv_s2 = sym_solve(&sum, g2.cov(), "sum of covariances")?;
    let sum_inv_s1 = sym_solve(&sum, g1.cov(), "sum of covariances")?;
    let cov = symmetrize(&(g1.cov() * &sum_inv_s2));
    let mean = sum_inv_s2.transpose() * g1.mean() + sum_inv_s1.transpose() * g2.mean();
    let scale = Gaussian::new(g2.mean().clone(), sum)?.pdf(g1.mean())?;
    Ok((scale, Gaussian::new(mean, cov)?))
}

/// `ρ₁ / ρ₂ = c_q N(μ_q, Σ_q)`, defined when `Σ₂ − Σ₁` is positive definite.
pub fn gaussian_quotient(g1: &Gaussian, g2: &Gaussian) -> Result<(f64, Gaussian)> {
    if g1.dim() != g2.dim() {
        return Err(Error::dim("Gaussian quotient", g1.dim(), g2.dim()));
    }
    let diff = symmetrize(&(g2.cov() - g1.cov()));
    if nalgebra::Cholesky::new(diff.clone()).is_none() {
        return Err(Error::Domain(
            "quotient not normalizable: Σ₂ − Σ₁ is not positive definite".into(),
        ));
    }
    // Σ_q = (Σ₁⁻¹ − Σ₂⁻¹)⁻¹ = Σ₁ (Σ₂ − Σ₁)⁻¹ Σ₂
    let diff_inv_s2 = sym_solve(&diff, g2.cov(), "Σ₂ − Σ₁")?;
    let cov = symmetrize(&(g1.cov() * diff_inv_s2));
    let delta = g1.mean() - g2.mean();
    let diff_inv_delta = sym_solve(&diff, &Mat::from_column_slice(delta.len(), 1, delta.as_slice()), "Σ₂ − Σ₁")?;
    let mean = g1.mean() + (g1.cov() * diff_inv_delta).column(0);
    let log_scale = log_det_spd(g2.cov(), "Σ₂")? - log_det_spd(&diff, "Σ₂ − Σ₁")?
        - Gaussian::new(g2.mean().clone(), diff)?.log_pdf(g1.mean())?;
    Ok((log_scale.exp(), Gaussian::new(mean, cov)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::mat;
    use proptest::prelude::*;
    use rand::Rng;

    fn g(mean: &[f64], cov: Mat) -> Gaussian {
        Gaussian::new(Vector::from_row_slice(mean), cov).unwrap()
    }

    #[test]
    fn log_pdf_examples() {
        let std = g(&[0.0], mat(1, 1, &[1.0]));
        assert!((std.log_pdf(&Vector::from_vec(vec![0.0])).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);

        let two = g(&[0.0, 0.0], Mat::identity(2, 2));
        // Direct quadratic form: −log(2π) − 25/2.
        let expected = -(2.0 * PI).ln() - 12.5;
        assert!((expected + 14.337_877_066_409_345).abs() < 1e-12);
        assert!((two.log_pdf(&Vector::from_vec(vec![3.0, 4.0])).unwrap() - expected).abs() < 1e-12);

        let cov = mat(2, 2, &[2.0, 0.4, 0.4, 0.5]);
        let h = g(&[1.0, -1.0], cov.clone());
        let expected = -0.5 * ((2.0 * PI).powi(2) * cov.determinant()).ln();
        assert!((h.log_pdf(h.mean()).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn singular_covariance_is_reported() {
        let h = g(&[0.0, 0.0], mat(2, 2, &[1.0, 1.0, 1.0, 1.0]));
        assert!(matches!(h.log_pdf(&Vector::zeros(2)), Err(Error::Numerical(_))));
        let mix = GaussianMixture::new(vec![1.0], vec![h]).unwrap();
        let err = mix.log_pdf(&Vector::zeros(2)).unwrap_err();
        assert!(err.to_string().contains("component 0"));
    }

    #[test]
    fn construction_validates() {
        assert!(Gaussian::new(Vector::zeros(2), mat(2, 2, &[1.0, 0.0, 0.1, 1.0])).is_err());
        assert!(Gaussian::new(Vector::zeros(2), mat(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(GaussianMixture::new(vec![0.5, 0.4], vec![g(&[0.0], Mat::identity(1, 1)); 2]).is_err());
        assert!(GaussianMixture::new(vec![], vec![]).is_err());
    }

    #[test]
    fn log_pdf_ignores_round_off_asymmetry() {
        let cov = mat(2, 2, &[1.5, 0.3, 0.3 + 1e-12, 0.8]);
        let a = g(&[0.2, 0.1], cov.clone());
        let b = g(&[0.2, 0.1], symmetrize(&cov));
        let x = Vector::from_vec(vec![-0.7, 1.3]);
        assert!((a.log_pdf(&x).unwrap() - b.log_pdf(&x).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn degenerate_samples_equal_mean() {
        let mix = GaussianMixture::single(g(&[1.0, 2.0], Mat::zeros(2, 2)));
        for x in mix.sample(50, 3) {
            assert_eq!(x, Vector::from_vec(vec![1.0, 2.0]));
        }
    }

    #[test]
    fn sample_moments_and_frequencies() {
        let mix = GaussianMixture::single(g(&[0.0, 0.0], Mat::identity(2, 2)));
        let xs = mix.sample(100_000, 11);
        let n = xs.len() as f64;
        let mean = xs.iter().fold(Vector::zeros(2), |a, x| a + x) / n;
        let cov = xs.iter().fold(Mat::zeros(2, 2), |a, x| a + (x - &mean) * (x - &mean).transpose()) / n;
        assert!(mean.amax() < 0.02);
        assert!((cov - Mat::identity(2, 2)).amax() < 0.03);

        let two = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![g(&[-5.0], Mat::identity(1, 1)), g(&[5.0], Mat::identity(1, 1))],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = two.sample_labelled_with(100_000, &mut rng);
        let freq = labels.iter().filter(|(i, _)| *i == 0).count() as f64 / 1e5;
        assert!((freq - 0.5).abs() < 0.01);
        assert_eq!(two.sample(10, 9), two.sample(10, 9));
    }

    #[test]
    fn mixture_density_integrates_to_one() {
        // Importance sampling with a broad Gaussian proposal.
        let mix = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![
                g(&[-1.0, 0.5], mat(2, 2, &[0.5, 0.1, 0.1, 0.3])),
                g(&[1.5, -0.5], mat(2, 2, &[0.8, -0.2, -0.2, 0.6])),
            ],
        )
        .unwrap();
        let proposal = GaussianMixture::single(g(&[0.0, 0.0], Mat::identity(2, 2) * 4.0));
        let xs = proposal.sample(200_000, 21);
        let ratios: Vec<f64> = xs
            .iter()
            .map(|x| (mix.log_pdf(x).unwrap() - proposal.log_pdf(x).unwrap()).exp())
            .collect();
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 1.0).abs() < 3.0 * (var / n).sqrt(), "estimate {mean}");
    }

    #[test]
    fn product_examples() {
        let std = g(&[0.0], mat(1, 1, &[1.0]));
        let (c, p) = gaussian_product(&std, &std).unwrap();
        assert!((c - 1.0 / (4.0 * PI).sqrt()).abs() < 1e-14);
        assert!(p.mean()[0].abs() < 1e-15);
        assert!((p.cov()[(0, 0)] - 0.5).abs() < 1e-15);
        for x in [0.0, 1.0] {
            let x = Vector::from_vec(vec![x]);
            let lhs = std.pdf(&x).unwrap().powi(2);
            assert!((lhs - c * p.pdf(&x).unwrap()).abs() < 1e-15);
        }

        let h = g(&[1.0, -2.0], mat(2, 2, &[2.0, 0.3, 0.3, 1.0]));
        let (_, p) = gaussian_product(&h, &h).unwrap();
        assert!((p.cov() - h.cov() * 0.5).amax() < 1e-14);
        assert!((p.mean() - h.mean()).amax() < 1e-14);
    }

    #[test]
    fn quotient_examples() {
        let (_, q) = gaussian_quotient(&g(&[0.0], mat(1, 1, &[1.0])), &g(&[0.0], mat(1, 1, &[2.0]))).unwrap();
        assert!((q.cov()[(0, 0)] - 2.0).abs() < 1e-14);
        assert!(q.mean()[0].abs() < 1e-15);
        let h = g(&[0.0], mat(1, 1, &[1.0]));
        assert!(matches!(gaussian_quotient(&h, &h), Err(Error::Domain(_))));
    }

    fn random_pd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Mat {
        let a = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + Mat::identity(n, n) * floor
    }

    #[test]
    fn product_and_quotient_hold_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = 2;
            let g1 = Gaussian::new(Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)), random_pd(&mut rng, n, 0.2)).unwrap();
            let g2 = Gaussian::new(Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)), random_pd(&mut rng, n, 0.2)).unwrap();
            let (cp, p) = gaussian_product(&g1, &g2).unwrap();
            // Σ₃ = Σ₁ + extra keeps Σ₃ − Σ₁ PD for the quotient.
            let g3 = Gaussian::new(g2.mean().clone(), g1.cov() + random_pd(&mut rng, n, 0.3)).unwrap();
            let (cq, q) = gaussian_quotient(&g1, &g3).unwrap();
            for _ in 0..100 {
                let x = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
                let lhs = g1.pdf(&x).unwrap() * g2.pdf(&x).unwrap();
                let rhs = cp * p.pdf(&x).unwrap();
                assert!(((lhs - rhs) / lhs).abs() < 1e-10);
                let lhs = g1.pdf(&x).unwrap() / g3.pdf(&x).unwrap();
                let rhs = cq * q.pdf(&x).unwrap();
                assert!(((lhs - rhs) / lhs).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn product_identity_property(
            m in proptest::collection::vec(-2.0f64..2.0, 4),
            l in proptest::collection::vec(-1.0f64..1.0, 6),
            x in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let f1 = mat(2, 2, &[l[0], 0.0, l[1], l[2]]);
            let f2 = mat(2, 2, &[l[3], 0.0, l[4], l[5]]);
            let g1 = Gaussian::new(Vector::from_row_slice(&m[..2]), &f1 * f1.transpose() + Mat::identity(2, 2) * 0.1).unwrap();
            let g2 = Gaussian::new(Vector::from_row_slice(&m[2..]), &f2 * f2.transpose() + Mat::identity(2, 2) * 0.1).unwrap();
            let (c, p) = gaussian_product(&g1, &g2).unwrap();
            let x = Vector::from_row_slice(&x);
            let lhs = g1.log_pdf(&x).unwrap() + g2.log_pdf(&x).unwrap();
            let rhs = c.ln() + p.log_pdf(&x).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
