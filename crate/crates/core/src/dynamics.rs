//! Linear time-varying dynamics on a uniform grid over the unit horizon.
//!
//! Matrices are stored per knot and held constant on `[t_k, t_{k+1})`. Transition
//! matrices and controllability Grammians are integrated with classical RK4 (four
//! sub-steps per knot interval); the moment recursions used inside the conic programs are
//! forward Euler on the same grid.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize, Mat, Vector};

/// RK4 sub-steps per knot interval.
pub const RK4_SUBSTEPS: usize = 4;

/// Smallest admissible eigenvalue of `M(1, 0)`.
pub const CONTROLLABILITY_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `count` knots on `[0, 1]`.
    pub fn uniform(count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::Config(format!(
                "time grid needs at least 2 knots, got {count}"
            )));
        }
        let dt = 1.0 / (count - 1) as f64;
        let mut knots: Vec<f64> = (0..count).map(|k| k as f64 * dt).collect();
        knots[count - 1] = 1.0;
        Ok(Self { knots })
    }

    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        let count = knots.len();
        if count < 2 {
            return Err(Error::Config("time grid needs at least 2 knots".into()));
        }
        if knots[0] != 0.0 || knots[count - 1] != 1.0 {
            return Err(Error::Config("time grid must start at 0 and end at 1".into()));
        }
        let dt = 1.0 / (count - 1) as f64;
        for (k, w) in knots.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Config(format!("knots not increasing at {k}")));
            }
            if ((w[1] - w[0]) - dt).abs() > 1e-12 {
                return Err(Error::Config(format!("non-uniform spacing at knot {k}")));
            }
        }
        Ok(Self { knots })
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / (self.knots.len() - 1) as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.knots[k]
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn last(&self) -> usize {
        self.knots.len() - 1
    }
}

/// `dx = A x dt + Ā x̄ dt + B u dt + D dw`, one matrix of each kind per knot.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvSystem {
    n: usize,
    m: usize,
    q: usize,
    a: Vec<Mat>,
    abar: Vec<Mat>,
    b: Vec<Mat>,
    d: Vec<Mat>,
}

impl LtvSystem {
    pub fn new(a: Vec<Mat>, abar: Vec<Mat>, b: Vec<Mat>, d: Vec<Mat>) -> Result<Self> {
        let count = a.len();
        if count < 2 {
            return Err(Error::Config("system needs matrices for at least 2 knots".into()));
        }
        for (name, list) in [("Abar", &abar), ("B", &b), ("D", &d)] {
            if list.len() != count {
                return Err(Error::dim(format!("per-knot list {name}"), count, list.len()));
            }
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        let q = d[0].ncols();
        if n == 0 || m == 0 {
            return Err(Error::Config("state and control dimensions must be positive".into()));
        }
        for k in 0..count {
            let check = |name: &str, mat: &Mat, rows: usize, cols: usize| -> Result<()> {
                if mat.shape() != (rows, cols) {
                    return Err(Error::dim(
                        format!("{name} at knot {k}"),
                        format!("{rows}x{cols}"),
                        format!("{}x{}", mat.nrows(), mat.ncols()),
                    ));
                }
                Ok(())
            };
            check("A", &a[k], n, n)?;
            check("Abar", &abar[k], n, n)?;
            check("B", &b[k], n, m)?;
            check("D", &d[k], n, q)?;
        }
        Ok(Self {
            n,
            m,
            q,
            a,
            abar,
            b,
            d,
        })
    }

    /// Time-invariant system replicated over `count` knots.
    pub fn constant(a: Mat, abar: Mat, b: Mat, d: Mat, count: usize) -> Result<Self> {
        Self::new(
            vec![a; count],
            vec![abar; count],
            vec![b; count],
            vec![d; count],
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn knot_count(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self, k: usize) -> &Mat {
        &self.a[k]
    }

    pub fn abar(&self, k: usize) -> &Mat {
        &self.abar[k]
    }

    pub fn b(&self, k: usize) -> &Mat {
        &self.b[k]
    }

    pub fn d(&self, k: usize) -> &Mat {
        &self.d[k]
    }

    /// `A_k`, or `A_k + Ā_k` when the mean dynamics are requested.
    pub fn drift(&self, k: usize, use_meanfield_matrix: bool) -> Mat {
        if use_meanfield_matrix {
            &self.a[k] + &self.abar[k]
        } else {
            self.a[k].clone()
        }
    }

    pub fn has_meanfield(&self) -> bool {
        self.abar.iter().any(|m| m.iter().any(|v| *v != 0.0))
    }

    /// True when every per-knot matrix equals the one at knot 0.
    pub fn is_time_invariant(&self) -> bool {
        let same = |list: &[Mat]| list.iter().all(|m| m == &list[0]);
        same(&self.a) && same(&self.abar) && same(&self.b) && same(&self.d)
    }

    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if grid.len() != self.knot_count() {
            return Err(Error::dim("system knots vs grid", grid.len(), self.knot_count()));
        }
        Ok(())
    }

    /// Errors unless `M(1, 0)` for the selected drift is positive definite.
    pub fn check_controllable(&self, grid: &TimeGrid, use_meanfield_matrix: bool) -> Result<()> {
        let m10 = grammian(self, grid, use_meanfield_matrix, grid.last(), 0)?;
        let min = min_eigenvalue(&m10);
        if min <= CONTROLLABILITY_THRESHOLD {
            let which = if use_meanfield_matrix { "(A+Abar, B)" } else { "(A, B)" };
            return Err(Error::Controllability(format!(
                "{which}: smallest Grammian eigenvalue {min:.3e}"
            )));
        }
        Ok(())
    }
}

fn rk4<F>(x: &Mat, h: f64, f: F) -> Mat
where
    F: Fn(&Mat) -> Mat,
{
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (h / 2.0)));
    let k3 = f(&(x + &k2 * (h / 2.0)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Transition matrix across one knot interval `[t_k, t_{k+1}]`.
fn phi_step(sys: &LtvSystem, dt: f64, k: usize, use_mf: bool) -> Mat {
    let a = sys.drift(k, use_mf);
    let h = dt / RK4_SUBSTEPS as f64;
    let mut phi = Mat::identity(sys.n, sys.n);
    for _ in 0..RK4_SUBSTEPS {
        phi = rk4(&phi, h, |p| &a * p);
    }
    phi
}

/// `M(t_{k+1}, t_k)`: Grammian accumulated over one knot interval.
fn gram_step(sys: &LtvSystem, dt: f64, k: usize, use_mf: bool) -> Mat {
    let a = sys.drift(k, use_mf);
    let bbt = &sys.b[k] * sys.b[k].transpose();
    let h = dt / RK4_SUBSTEPS as f64;
    let mut m = Mat::zeros(sys.n, sys.n);
    for _ in 0..RK4_SUBSTEPS {
        m = rk4(&m, h, |x| &a * x + x * a.transpose() + &bbt);
    }
    symmetrize(&m)
}

fn check_knots(sys: &LtvSystem, grid: &TimeGrid, t: usize, s: usize) -> Result<()> {
    sys.check_grid(grid)?;
    for k in [t, s] {
        if k >= grid.len() {
            return Err(Error::Config(format!("knot {k} outside grid of {}", grid.len())));
        }
    }
    Ok(())
}

/// `Φ(t_t, t_s)` for the drift `A` (or `A + Ā`). Knot indices, either order.
pub fn state_transition(
    sys: &LtvSystem,
    grid: &TimeGrid,
    use_meanfield_matrix: bool,
    t: usize,
    s: usize,
) -> Result<Mat> {
    check_knots(sys, grid, t, s)?;
    let (lo, hi) = if t >= s { (s, t) } else { (t, s) };
    let mut phi = Mat::identity(sys.n, sys.n);
    for k in lo..hi {
        phi = phi_step(sys, grid.dt(), k, use_meanfield_matrix) * phi;
    }
    if t >= s {
        Ok(phi)
    } else {
        phi.try_inverse()
            .ok_or_else(|| Error::Numerical("singular state transition matrix".into()))
    }
}

/// Controllability Grammian `M(t_t, t_s) = ∫ Φ(t,τ) B Bᵀ Φ(t,τ)ᵀ dτ` for `t ≥ s`.
pub fn grammian(
    sys: &LtvSystem,
    grid: &TimeGrid,
    use_meanfield_matrix: bool,
    t: usize,
    s: usize,
) -> Result<Mat> {
    check_knots(sys, grid, t, s)?;
    if t < s {
        return Err(Error::Ordering { t, s });
    }
    let mut m = Mat::zeros(sys.n, sys.n);
    for k in s..t {
        let phi = phi_step(sys, grid.dt(), k, use_meanfield_matrix);
        m = &phi * m * phi.transpose() + gram_step(sys, grid.dt(), k, use_meanfield_matrix);
    }
    Ok(symmetrize(&m))
}

/// Transition matrices and Grammians anchored at the horizon ends, for every knot.
#[derive(Debug, Clone)]
pub struct TransitionBundle {
    /// `Φ(t_k, 0)`.
    pub phi_from_start: Vec<Mat>,
    /// `Φ(1, t_k)`.
    pub phi_to_end: Vec<Mat>,
    /// `M(t_k, 0)`.
    pub gram_from_start: Vec<Mat>,
    /// `M(1, t_k)`.
    pub gram_to_end: Vec<Mat>,
}

impl TransitionBundle {
    pub fn new(sys: &LtvSystem, grid: &TimeGrid, use_meanfield_matrix: bool) -> Result<Self> {
        sys.check_grid(grid)?;
        let count = grid.len();
        let n = sys.n;
        let dt = grid.dt();
        let steps: Vec<Mat> = (0..count - 1)
            .map(|k| phi_step(sys, dt, k, use_meanfield_matrix))
            .collect();
        let grams: Vec<Mat> = (0..count - 1)
            .map(|k| gram_step(sys, dt, k, use_meanfield_matrix))
            .collect();

        let mut phi_from_start = Vec::with_capacity(count);
        let mut gram_from_start = Vec::with_capacity(count);
        phi_from_start.push(Mat::identity(n, n));
        gram_from_start.push(Mat::zeros(n, n));
        for k in 0..count - 1 {
            phi_from_start.push(&steps[k] * &phi_from_start[k]);
            let g = &steps[k] * &gram_from_start[k] * steps[k].transpose() + &grams[k];
            gram_from_start.push(symmetrize(&g));
        }

        let mut phi_to_end = vec![Mat::identity(n, n); count];
        let mut gram_to_end = vec![Mat::zeros(n, n); count];
        for k in (0..count - 1).rev() {
            phi_to_end[k] = &phi_to_end[k + 1] * &steps[k];
            let g = &gram_to_end[k + 1]
                + &phi_to_end[k + 1] * &grams[k] * phi_to_end[k + 1].transpose();
            gram_to_end[k] = symmetrize(&g);
        }
        Ok(Self {
            phi_from_start,
            phi_to_end,
            gram_from_start,
            gram_to_end,
        })
    }

    pub fn phi_10(&self) -> &Mat {
        &self.phi_from_start[self.phi_from_start.len() - 1]
    }

    pub fn gram_10(&self) -> &Mat {
        &self.gram_to_end[0]
    }
}

/// Moment recursions of one Euler–Maruyama step `x⁺ = x + Δt(Ax + Āx̄ + Bu) + √Δt D z`
/// under the affine policy `u = K(x − μ) + v`, with `F = I + ΔtA`, `U = KΣ` and
/// `Y = KΣKᵀ`:
///
/// ```text
/// Σ⁺ = FΣFᵀ + Δt (B U Fᵀ + F Uᵀ Bᵀ) + Δt² B Y Bᵀ + Δt D Dᵀ
/// μ⁺ = μ + Δt (A μ + Ā x̄ + B v)
/// ```
///
/// Both are linear in (Σ, U, Y, μ, v). Replacing `Y = UΣ⁻¹Uᵀ` by `Y ⪰ UΣ⁻¹Uᵀ` gives the
/// convex relaxation used by the steering program.
#[derive(Debug, Clone)]
pub struct MomentStep {
    pub dt: f64,
    pub a: Mat,
    pub abar: Mat,
    pub b: Mat,
    pub noise: Mat,
}

impl MomentStep {
    /// `I + ΔtA`.
    pub fn transition(&self) -> Mat {
        Mat::identity(self.a.nrows(), self.a.ncols()) + &self.a * self.dt
    }

    pub fn propagate_cov(&self, sigma: &Mat, u: &Mat, y: &Mat) -> Mat {
        let f = self.transition();
        let buf = &self.b * u * f.transpose() * self.dt;
        &f * sigma * f.transpose()
            + &buf
            + buf.transpose()
            + &self.b * y * self.b.transpose() * (self.dt * self.dt)
            + &self.noise * self.dt
    }

    pub fn propagate_mean(&self, mu: &Vector, xbar: Option<&Vector>, v: &Vector) -> Vector {
        let mut drift = &self.a * mu + &self.b * v;
        if let Some(xb) = xbar {
            drift += &self.abar * xb;
        }
        mu + drift * self.dt
    }
}

pub fn discretize_moments(sys: &LtvSystem, grid: &TimeGrid) -> Result<Vec<MomentStep>> {
    sys.check_grid(grid)?;
    let dt = grid.dt();
    Ok((0..grid.len() - 1)
        .map(|k| MomentStep {
            dt,
            a: sys.a[k].clone(),
            abar: sys.abar[k].clone(),
            b: sys.b[k].clone(),
            noise: &sys.d[k] * sys.d[k].transpose(),
        })
        .collect())
}

/// Convenience for tests and fixtures.
pub fn mat(rows: usize, cols: usize, row_major: &[f64]) -> Mat {
    DMatrix::from_row_slice(rows, cols, row_major)
}
