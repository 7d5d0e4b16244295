//! Probabilistic half-space constraints.
//!
//! A constraint asks that `P(aᵀx ≤ β) ≥ 1 − δ` for a Gaussian state. For a Gaussian this
//! is `z √(aᵀΣa) + aᵀμ − β ≤ 0` with `z = Φ⁻¹(1 − δ)`, which is concave in Σ. Embedding it
//! in a conic program uses the tangent of the square root at a reference covariance,
//! which over-approximates the left side and therefore never admits an unsafe Σ.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};
use crate::gaussmix::Gaussian;
use crate::linalg::{Mat, Vector};

/// Inclusive time window in which a constraint is enforced. Boundary knots are always
/// excluded since the boundary distributions are fixed data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnotWindow {
    pub start: f64,
    pub end: f64,
}

impl KnotWindow {
    pub fn all() -> Self {
        Self { start: 0.0, end: 1.0 }
    }

    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start > end {
            return Err(Error::Config(format!("invalid constraint window [{start}, {end}]")));
        }
        Ok(Self { start, end })
    }

    /// Window covering knots `k0..=k1` of `grid`.
    pub fn from_knots(grid: &TimeGrid, k0: usize, k1: usize) -> Result<Self> {
        if k0 > k1 || k1 >= grid.len() {
            return Err(Error::Config(format!(
                "knot window [{k0}, {k1}] outside 0..{}",
                grid.len()
            )));
        }
        Self::new(grid.time(k0), grid.time(k1))
    }

    pub fn contains(&self, grid: &TimeGrid, k: usize) -> bool {
        if k == 0 || k >= grid.last() {
            return false;
        }
        let t = grid.time(k);
        let slack = 1e-9 * grid.dt();
        t >= self.start - slack && t <= self.end + slack
    }

    pub fn knots(&self, grid: &TimeGrid) -> impl Iterator<Item = usize> + '_ {
        let grid = grid.clone();
        (0..grid.len()).filter(move |&k| self.contains(&grid, k))
    }
}

impl Default for KnotWindow {
    fn default() -> Self {
        Self::all()
    }
}

/// The free side `aᵀx ≤ β` of one face.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace {
    a: Vector,
    beta: f64,
    window: KnotWindow,
}

impl HalfSpace {
    pub fn new(a: Vector, beta: f64, window: KnotWindow) -> Result<Self> {
        if !(a.norm() > 0.0) || !beta.is_finite() {
            return Err(Error::Config("half-space needs a nonzero normal and finite offset".into()));
        }
        Ok(Self { a, beta, window })
    }

    pub fn normal(&self) -> &Vector {
        &self.a
    }

    pub fn offset(&self) -> f64 {
        self.beta
    }

    pub fn window(&self) -> KnotWindow {
        self.window
    }

    pub fn with_window(&self, window: KnotWindow) -> Self {
        Self {
            window,
            ..self.clone()
        }
    }

    pub fn satisfied_by(&self, x: &Vector) -> bool {
        self.a.dot(x) <= self.beta
    }

    /// `P(aᵀx > β)` under `g`.
    pub fn tail_probability(&self, g: &Gaussian) -> f64 {
        let mean = self.a.dot(g.mean());
        let var = (g.cov() * &self.a).dot(&self.a);
        if var <= 0.0 {
            return if mean > self.beta { 1.0 } else { 0.0 };
        }
        let std = Normal::standard();
        1.0 - std.cdf((self.beta - mean) / var.sqrt())
    }
}

/// Convex polytope obstacle `{x : aₙᵀx > βₙ for every face n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    faces: Vec<HalfSpace>,
}

impl Obstacle {
    pub fn new(faces: Vec<HalfSpace>) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::Config("obstacle without faces".into()));
        }
        let n = faces[0].a.len();
        if faces.iter().any(|f| f.a.len() != n) {
            return Err(Error::Config("obstacle faces differ in dimension".into()));
        }
        Ok(Self { faces })
    }

    pub fn faces(&self) -> &[HalfSpace] {
        &self.faces
    }

    pub fn contains(&self, x: &Vector) -> bool {
        self.faces.iter().all(|f| !f.satisfied_by(x))
    }
}

/// A homotopy class: one enforced face per obstacle.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub name: String,
    pub face_choice: Vec<usize>,
}

impl Route {
    pub fn direct() -> Self {
        Self {
            name: "direct".into(),
            face_choice: Vec::new(),
        }
    }

    /// The half-spaces enforced on this route, with the given window.
    pub fn halfspaces(&self, obstacles: &[Obstacle], window: KnotWindow) -> Result<Vec<HalfSpace>> {
        if self.face_choice.len() != obstacles.len() {
            return Err(Error::Config(format!(
                "route `{}` chooses {} faces for {} obstacles",
                self.name,
                self.face_choice.len(),
                obstacles.len()
            )));
        }
        self.face_choice
            .iter()
            .zip(obstacles)
            .enumerate()
            .map(|(o, (&f, obs))| {
                obs.faces
                    .get(f)
                    .map(|h| h.with_window(window))
                    .ok_or_else(|| Error::Config(format!("route `{}`: obstacle {o} has no face {f}", self.name)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    /// Total violation probability shared equally by union bound.
    Total(f64),
    /// Fixed probability for every enforced face.
    PerFace(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChanceSpec {
    pub budget: Budget,
    pub window: KnotWindow,
}

impl ChanceSpec {
    pub fn validate(&self) -> Result<()> {
        let d = match self.budget {
            Budget::Total(d) | Budget::PerFace(d) => d,
        };
        if !(d > 0.0 && d < 0.5) {
            return Err(Error::Config(format!("violation budget {d} outside (0, 1/2)")));
        }
        Ok(())
    }
}

/// Per-(component, face) violation probability.
pub fn allocate_budget(spec: &ChanceSpec, n_components: usize, n_faces: usize) -> Result<f64> {
    spec.validate()?;
    if n_faces == 0 || n_components == 0 {
        return Err(Error::Config("budget given but no constrained faces".into()));
    }
    let delta = match spec.budget {
        Budget::Total(d) => d / (n_components * n_faces) as f64,
        Budget::PerFace(d) => d,
    };
    Ok(delta)
}

/// `Φ⁻¹(1 − δ)`.
pub fn quantile(delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("violation probability {delta} outside (0, 1)")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - delta))
}

/// `z √(aᵀΣa) + aᵀμ − β`; nonpositive exactly when `P(aᵀx ≤ β) ≥ 1 − δ`.
pub fn exact_constraint_value(g: &Gaussian, h: &HalfSpace, delta: f64) -> Result<f64> {
    let z = quantile(delta)?;
    let var = (g.cov() * &h.a).dot(&h.a).max(0.0);
    Ok(z * var.sqrt() + h.a.dot(g.mean()) - h.beta)
}

/// Constraint `ℓᵀΣℓ + aᵀμ + b ≤ 0`, affine in the moments.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedConstraint {
    pub ell: Vector,
    pub a: Vector,
    pub b: f64,
    pub window: KnotWindow,
}

impl LinearizedConstraint {
    pub fn value(&self, sigma: &Mat, mu: &Vector) -> f64 {
        (sigma * &self.ell).dot(&self.ell) + self.a.dot(mu) + self.b
    }
}

/// Tangent-line version of the exact constraint at reference covariance `sigma_ref`.
pub fn linearize(h: &HalfSpace, delta: f64, sigma_ref: &Mat) -> Result<LinearizedConstraint> {
    if delta >= 0.5 {
        return Err(Error::Domain(format!(
            "violation probability {delta} gives a nonpositive quantile"
        )));
    }
    let z = quantile(delta)?;
    let xr = (sigma_ref * &h.a).dot(&h.a);
    if !(xr > 1e-14) || !xr.is_finite() {
        return Err(Error::Domain(format!("reference variance {xr} along the face normal is degenerate")));
    }
    let root = xr.sqrt();
    Ok(LinearizedConstraint {
        ell: &h.a * (z / (2.0 * root)).sqrt(),
        a: h.a.clone(),
        b: -h.beta + z * root / 2.0,
        window: h.window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize, i: usize) -> Vector {
        let mut v = Vector::zeros(n);
        v[i] = 1.0;
        v
    }

    fn spec(budget: Budget) -> ChanceSpec {
        ChanceSpec {
            budget,
            window: KnotWindow::all(),
        }
    }

    #[test]
    fn allocation_examples() {
        let d = allocate_budget(&spec(Budget::Total(0.009)), 1, 3).unwrap();
        assert!((d - 0.003).abs() < 1e-15);
        assert_eq!(allocate_budget(&spec(Budget::Total(0.01)), 1, 1).unwrap(), 0.01);
        assert_eq!(allocate_budget(&spec(Budget::PerFace(0.003)), 4, 3).unwrap(), 0.003);
        assert!(matches!(allocate_budget(&spec(Budget::Total(0.01)), 1, 0), Err(Error::Config(_))));
        assert!(allocate_budget(&spec(Budget::Total(0.6)), 1, 1).is_err());
        // Weighted by any λ summing to at most one per face, the union bound stays in budget.
        let (nc, nf) = (3, 2);
        let d = allocate_budget(&spec(Budget::Total(0.05)), nc, nf).unwrap();
        let lambda = [0.5, 0.3, 0.2];
        let used: f64 = lambda.iter().map(|l| l * d * nf as f64 * nc as f64).sum();
        assert!(used <= 0.05 + 1e-15);
    }

    #[test]
    fn exact_value_examples() {
        let g = Gaussian::new(Vector::from_vec(vec![0.3]), Mat::identity(1, 1)).unwrap();
        let h = HalfSpace::new(unit(1, 0), 2.0, KnotWindow::all()).unwrap();
        assert!((exact_constraint_value(&g, &h, 0.5).unwrap() - (0.3 - 2.0)).abs() < 1e-12);

        let g0 = Gaussian::new(Vector::zeros(1), Mat::identity(1, 1)).unwrap();
        let v = exact_constraint_value(&g0, &h, 0.02275).unwrap();
        assert!(v.abs() < 1e-3, "{v}");

        let det = Gaussian::new(Vector::from_vec(vec![1.5, 0.0]), Mat::zeros(2, 2)).unwrap();
        let h2 = HalfSpace::new(unit(2, 0), 2.0, KnotWindow::all()).unwrap();
        assert!((exact_constraint_value(&det, &h2, 0.01).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn linearization_example() {
        // x_r = 1 and z = 2 need δ = 1 − Φ(2).
        let delta = 1.0 - Normal::standard().cdf(2.0);
        let h = HalfSpace::new(unit(2, 1), 5.0, KnotWindow::all()).unwrap();
        let sigma_ref = Mat::identity(2, 2);
        let lin = linearize(&h, delta, &sigma_ref).unwrap();
        assert!((&lin.ell - unit(2, 1)).amax() < 1e-8);
        assert!((lin.b + 4.0).abs() < 1e-8);
        assert!(matches!(linearize(&h, 0.5, &sigma_ref), Err(Error::Domain(_))));
        assert!(matches!(linearize(&h, 0.1, &Mat::zeros(2, 2)), Err(Error::Domain(_))));
    }

    #[test]
    fn windows_skip_boundaries() {
        let grid = TimeGrid::uniform(11).unwrap();
        let all: Vec<usize> = KnotWindow::all().knots(&grid).collect();
        assert_eq!(all, (1..10).collect::<Vec<_>>());
        let w = KnotWindow::from_knots(&grid, 3, 5).unwrap();
        assert_eq!(w.knots(&grid).collect::<Vec<_>>(), vec![3, 4, 5]);
        assert!(KnotWindow::from_knots(&grid, 5, 3).is_err());
    }

    #[test]
    fn obstacles_and_routes() {
        let w = KnotWindow::all();
        let faces = vec![
            HalfSpace::new(unit(2, 0), -1.0, w).unwrap(),
            HalfSpace::new(-unit(2, 0), -1.0, w).unwrap(),
        ];
        // Free sides are x₀ ≤ −1 and x₀ ≥ 1, so the obstacle is the slab −1 < x₀ < 1.
        let obs = Obstacle::new(faces).unwrap();
        assert!(obs.contains(&Vector::from_vec(vec![0.0, 3.0])));
        assert!(!obs.contains(&Vector::from_vec(vec![2.0, 0.0])));
        let route = Route {
            name: "left".into(),
            face_choice: vec![0],
        };
        let hs = route.halfspaces(std::slice::from_ref(&obs), KnotWindow::new(0.2, 0.8).unwrap()).unwrap();
        assert_eq!(hs.len(), 1);
        assert_eq!(hs[0].window().start, 0.2);
        assert!(Route { name: "bad".into(), face_choice: vec![2] }.halfspaces(&[obs], w).is_err());
    }

    #[test]
    fn monte_carlo_violation_within_budget() {
        let delta = 0.01;
        let g = Gaussian::new(Vector::from_vec(vec![0.0, 0.0]), Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5])).unwrap();
        let a = Vector::from_vec(vec![0.6, 0.8]);
        // Place the face with a small margin beyond the exact requirement.
        let var = (g.cov() * &a).dot(&a);
        let beta = quantile(delta).unwrap() * var.sqrt() + 0.01;
        let h = HalfSpace::new(a, beta, KnotWindow::all()).unwrap();
        assert!(exact_constraint_value(&g, &h, delta).unwrap() < 0.0);
        let n = 100_000;
        let mixture = crate::gaussmix::GaussianMixture::single(g);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bad = mixture.sample_with(n, &mut rng).iter().filter(|x| !h.satisfied_by(x)).count();
        let freq = bad as f64 / n as f64;
        let se = (delta * (1.0 - delta) / n as f64).sqrt();
        assert!(freq <= delta + 3.0 * se, "{freq}");
    }

    fn pd_matrix() -> impl Strategy<Value = Mat> {
        prop::collection::vec(-1.0f64..1.0, 9).prop_map(|v| {
            let l = Mat::from_row_slice(3, 3, &v);
            &l * l.transpose() + Mat::identity(3, 3) * 0.05
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn linearization_is_conservative_and_tangent(
            sigma in pd_matrix(), sigma_ref in pd_matrix(),
            a in prop::collection::vec(-1.0f64..1.0, 3), mu in prop::collection::vec(-2.0f64..2.0, 3),
            beta in -3.0f64..3.0, delta in 0.001f64..0.45,
        ) {
            let a = Vector::from_vec(a);
            prop_assume!(a.norm() > 0.1);
            let h = HalfSpace::new(a, beta, KnotWindow::all()).unwrap();
            let mu = Vector::from_vec(mu);
            let lin = linearize(&h, delta, &sigma_ref).unwrap();
            let g = Gaussian::new(mu.clone(), sigma.clone()).unwrap();
            let exact = exact_constraint_value(&g, &h, delta).unwrap();
            prop_assert!(lin.value(&sigma, &mu) >= exact - 1e-10);
            let gr = Gaussian::new(mu.clone(), sigma_ref.clone()).unwrap();
            let exact_r = exact_constraint_value(&gr, &h, delta).unwrap();
            prop_assert!((lin.value(&sigma_ref, &mu) - exact_r).abs() < 1e-10);
        }

        #[test]
        fn tighter_budget_never_loosens(sigma in pd_matrix(), d1 in 0.001f64..0.45, d2 in 0.001f64..0.45) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let g = Gaussian::new(Vector::zeros(3), sigma).unwrap();
            let h = HalfSpace::new(Vector::from_vec(vec![1.0, -0.5, 0.2]), 1.0, KnotWindow::all()).unwrap();
            prop_assert!(exact_constraint_value(&g, &h, lo).unwrap() >= exact_constraint_value(&g, &h, hi).unwrap());
        }
    }
}
