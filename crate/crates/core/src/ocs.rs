//! Gaussian-to-Gaussian covariance steering.
//!
//! After the change of variables `U = KΣ` and the Schur relaxation `Y ⪰ UΣ⁻¹Uᵀ`, the
//! Euler-discretized steering problem is a linear SDP in the per-knot moments. The
//! block builder here is shared by single solves and by the coupled mean-field program.

use std::io::Write;

use crate::chance::LinearizedConstraint;
use crate::conic::{AffExpr, BlockId, BlockShape, ConicProgram, ConicSolution, SymExpr, Tolerances};
use crate::dynamics::{discretize_moments, LtvSystem, MomentStep, TimeGrid, TransitionBundle};
use crate::error::{Error, Result};
use crate::gaussmix::Gaussian;
use crate::linalg::{inverse_sym_floored, min_eigenvalue, lower_triangle, solve_spd, sqrtm_psd, Mat, Vector};

/// Eigenvalue floor used when inverting covariances for gain recovery.
pub const GAIN_EIGEN_FLOOR: f64 = 1e-9;

/// Covariances whose smallest eigenvalue falls below `-INDEFINITE_TOLERANCE · (1 + ‖Σ‖)`
/// are rejected during gain recovery.
const INDEFINITE_TOLERANCE: f64 = 1e-7;

/// A single steering problem between two Gaussians.
#[derive(Debug, Clone)]
pub struct OcsProblem<'a> {
    pub sys: &'a LtvSystem,
    pub grid: &'a TimeGrid,
    pub initial: Gaussian,
    pub terminal: Gaussian,
    pub constraints: Vec<LinearizedConstraint>,
    /// Known mean-field trajectory entering the mean dynamics through Ā.
    pub meanfield_source: Option<&'a [Vector]>,
    pub tolerances: Tolerances,
}

impl<'a> OcsProblem<'a> {
    pub fn new(sys: &'a LtvSystem, grid: &'a TimeGrid, initial: Gaussian, terminal: Gaussian) -> Self {
        Self {
            sys,
            grid,
            initial,
            terminal,
            constraints: Vec::new(),
            meanfield_source: None,
            tolerances: Tolerances::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        self.sys.check_grid(self.grid)?;
        let n = self.sys.n();
        for (what, g) in [("initial Gaussian", &self.initial), ("terminal Gaussian", &self.terminal)] {
            if g.dim() != n {
                return Err(Error::dim(what, n, g.dim()));
            }
        }
        for c in &self.constraints {
            if c.a.len() != n || c.ell.len() != n {
                return Err(Error::dim("chance constraint", n, c.a.len()));
            }
        }
        if let Some(xbar) = self.meanfield_source {
            if xbar.len() != self.grid.len() || xbar.iter().any(|x| x.len() != n) {
                return Err(Error::dim("mean-field trajectory", self.grid.len(), xbar.len()));
            }
        }
        Ok(())
    }
}

/// How the mean recursion sees the population mean.
#[derive(Debug, Clone, Copy)]
pub(crate) enum MeanCoupling<'a> {
    /// No Ā term.
    Absent,
    /// Ā x̄ₖ with a given trajectory.
    Fixed(&'a [Vector]),
    /// Ā x̄ₖ with x̄ₖ a program variable.
    Shared(&'a [BlockId]),
}

/// Block handles of one steering problem inside a larger program.
#[derive(Debug, Clone)]
pub(crate) struct OcsBlocks {
    pub cov: Vec<BlockId>,
    pub mean: Vec<BlockId>,
    pub cross: Vec<BlockId>,
    pub cross_epi: Vec<BlockId>,
    pub ff: Vec<BlockId>,
    pub ff_epi: Vec<BlockId>,
}

fn sym_entries(prog: &ConicProgram, id: BlockId, n: usize) -> Vec<Vec<AffExpr>> {
    (0..n).map(|i| (0..n).map(|j| prog.entry(id, i, j)).collect()).collect()
}

fn mat_entries(prog: &ConicProgram, id: BlockId, rows: usize, cols: usize) -> Vec<Vec<AffExpr>> {
    (0..rows).map(|i| (0..cols).map(|j| prog.entry(id, i, j)).collect()).collect()
}

/// `(L X Rᵀ)[i][j]` for constant `L`, `R`.
fn congruence(l: &Mat, x: &[Vec<AffExpr>], r: &Mat, i: usize, j: usize) -> AffExpr {
    let mut out = AffExpr::zero();
    for (p, row) in x.iter().enumerate() {
        let lp = l[(i, p)];
        if lp == 0.0 {
            continue;
        }
        for (q, e) in row.iter().enumerate() {
            let c = lp * r[(j, q)];
            if c != 0.0 {
                out.add_scaled(e, c);
            }
        }
    }
    out
}

/// Adds the variables, dynamics, boundary and chance rows of one steering problem and
/// its weighted objective `weight · Σₖ Δt (tr Yₖ + sₖ)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn add_ocs_blocks(
    prog: &mut ConicProgram,
    prefix: &str,
    steps: &[MomentStep],
    grid: &TimeGrid,
    initial: &Gaussian,
    terminal: &Gaussian,
    constraints: &[LinearizedConstraint],
    coupling: MeanCoupling<'_>,
    weight: f64,
) -> Result<OcsBlocks> {
    let knots = grid.len();
    let n = initial.dim();
    let m = steps.first().map_or(0, |s| s.b.ncols());
    let mut blocks = OcsBlocks {
        cov: Vec::with_capacity(knots),
        mean: Vec::with_capacity(knots),
        cross: Vec::with_capacity(knots - 1),
        cross_epi: Vec::with_capacity(knots - 1),
        ff: Vec::with_capacity(knots - 1),
        ff_epi: Vec::with_capacity(knots - 1),
    };
    for k in 0..knots {
        blocks.cov.push(prog.add_block(format!("{prefix}cov[{k}]"), BlockShape::Symmetric(n))?);
        blocks.mean.push(prog.add_block(format!("{prefix}mean[{k}]"), BlockShape::Vector(n))?);
    }
    for k in 0..knots - 1 {
        blocks
            .cross
            .push(prog.add_block(format!("{prefix}cross[{k}]"), BlockShape::Matrix { rows: m, cols: n })?);
        blocks
            .cross_epi
            .push(prog.add_block(format!("{prefix}cross_epi[{k}]"), BlockShape::Symmetric(m))?);
        blocks.ff.push(prog.add_block(format!("{prefix}ff[{k}]"), BlockShape::Vector(m))?);
        blocks.ff_epi.push(prog.add_block(format!("{prefix}ff_epi[{k}]"), BlockShape::Scalar)?);
    }

    // Boundary moments.
    for (k, g) in [(0, initial), (knots - 1, terminal)] {
        for i in 0..n {
            for j in 0..=i {
                prog.add_equality(prog.entry(blocks.cov[k], i, j) - AffExpr::constant(g.cov()[(i, j)]));
            }
            prog.add_equality(prog.elem(blocks.mean[k], i) - AffExpr::constant(g.mean()[i]));
        }
    }

    for (k, step) in steps.iter().enumerate() {
        let dt = step.dt;
        let cov = sym_entries(prog, blocks.cov[k], n);
        let cross = mat_entries(prog, blocks.cross[k], m, n);
        let epi = sym_entries(prog, blocks.cross_epi[k], m);
        let f = step.transition();
        let bf = &step.b;
        // Σₖ₊₁ = FΣₖFᵀ + Δt (BUₖFᵀ + FUₖᵀBᵀ) + Δt² BYₖBᵀ + Δt DDᵀ
        for i in 0..n {
            for j in 0..=i {
                let mut rhs = congruence(&f, &cov, &f, i, j);
                let mixed = congruence(bf, &cross, &f, i, j) + congruence(bf, &cross, &f, j, i);
                rhs.add_scaled(&mixed, dt);
                rhs.add_scaled(&congruence(bf, &epi, bf, i, j), dt * dt);
                rhs.constant += dt * step.noise[(i, j)];
                prog.add_equality(prog.entry(blocks.cov[k + 1], i, j) - rhs);
            }
        }
        // μₖ₊₁ = μₖ + Δt (Aμₖ + Ā x̄ₖ + B vₖ)
        for i in 0..n {
            let mut rate = AffExpr::zero();
            for l in 0..n {
                if step.a[(i, l)] != 0.0 {
                    rate.add_scaled(&prog.elem(blocks.mean[k], l), step.a[(i, l)]);
                }
            }
            for l in 0..m {
                if step.b[(i, l)] != 0.0 {
                    rate.add_scaled(&prog.elem(blocks.ff[k], l), step.b[(i, l)]);
                }
            }
            match coupling {
                MeanCoupling::Absent => {}
                MeanCoupling::Fixed(xbar) => rate.constant += (&step.abar * &xbar[k])[i],
                MeanCoupling::Shared(ids) => {
                    for l in 0..n {
                        if step.abar[(i, l)] != 0.0 {
                            rate.add_scaled(&prog.elem(ids[k], l), step.abar[(i, l)]);
                        }
                    }
                }
            }
            let mut rhs = prog.elem(blocks.mean[k], i);
            rhs.add_scaled(&rate, dt);
            prog.add_equality(prog.elem(blocks.mean[k + 1], i) - rhs);
        }

        // [[Σₖ, Uₖᵀ], [Uₖ, Yₖ]] ⪰ 0
        let (cov_id, cross_id, epi_id) = (blocks.cov[k], blocks.cross[k], blocks.cross_epi[k]);
        let schur = SymExpr::from_fn(n + m, |i, j| match (i < n, j < n) {
            (true, true) => prog.entry(cov_id, i, j),
            (false, false) => prog.entry(epi_id, i - n, j - n),
            (false, true) => prog.entry(cross_id, i - n, j),
            (true, false) => prog.entry(cross_id, j - n, i),
        });
        prog.add_psd(schur);
        // [[1, vₖᵀ], [vₖ, sₖ]] ⪰ 0
        let (ff_id, ff_epi_id) = (blocks.ff[k], blocks.ff_epi[k]);
        let epi = SymExpr::from_fn(m + 1, |i, j| match (i, j) {
            (0, 0) => AffExpr::constant(1.0),
            (i, 0) => prog.elem(ff_id, i - 1),
            (i, j) if i == j => prog.scalar(ff_epi_id),
            _ => AffExpr::zero(),
        });
        prog.add_psd(epi);

        let mut stage = prog.scalar(blocks.ff_epi[k]);
        for i in 0..m {
            stage += prog.entry(blocks.cross_epi[k], i, i);
        }
        prog.add_objective(&stage, weight * dt);
    }

    // −(ℓᵀΣₖℓ + aᵀμₖ + b) ≥ 0
    for c in constraints {
        for k in c.window.knots(grid) {
            let mut row = AffExpr::constant(c.b);
            for i in 0..n {
                for j in 0..n {
                    let w = c.ell[i] * c.ell[j];
                    if w != 0.0 {
                        row.add_scaled(&prog.entry(blocks.cov[k], i, j), w);
                    }
                }
                if c.a[i] != 0.0 {
                    row.add_scaled(&prog.elem(blocks.mean[k], i), c.a[i]);
                }
            }
            prog.add_nonneg(-row);
        }
    }
    Ok(blocks)
}

impl OcsBlocks {
    /// Reads moments and gains back from a solved program.
    pub(crate) fn recover(&self, sol: &ConicSolution, dt: f64) -> Result<ConditionalPolicy> {
        let knots = self.cov.len();
        let covariances: Vec<Mat> = self.cov.iter().map(|id| sol.matrix(*id)).collect();
        let means: Vec<Vector> = self.mean.iter().map(|id| sol.vector(*id)).collect();
        let mut gains = Vec::with_capacity(knots);
        let mut feedforward = Vec::with_capacity(knots);
        for k in 0..knots - 1 {
            let (inv, min_eig) = inverse_sym_floored(&covariances[k], GAIN_EIGEN_FLOOR);
            let scale = 1.0 + covariances[k].amax();
            if !(min_eig >= -INDEFINITE_TOLERANCE * scale) {
                return Err(Error::Conditioning {
                    knot: k,
                    detail: format!("covariance minimum eigenvalue {min_eig:e}"),
                });
            }
            if min_eig < GAIN_EIGEN_FLOOR {
                log::debug!("covariance at knot {k} is numerically singular ({min_eig:e}); gain uses the floored inverse");
            }
            gains.push(sol.matrix(self.cross[k]) * inv);
            feedforward.push(sol.vector(self.ff[k]));
        }
        gains.push(gains[knots - 2].clone());
        feedforward.push(feedforward[knots - 2].clone());
        Ok(ConditionalPolicy::new(gains, feedforward, means, covariances, dt))
    }

    #[cfg(test)]
    pub(crate) fn cross_values(&self, sol: &ConicSolution) -> Vec<Mat> {
        self.cross.iter().map(|id| sol.matrix(*id)).collect()
    }
}

/// Affine feedback `u = K (x − μ) + v` per knot with its moment trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPolicy {
    gains: Vec<Mat>,
    feedforward: Vec<Vector>,
    means: Vec<Vector>,
    covariances: Vec<Mat>,
    cost: f64,
}

impl ConditionalPolicy {
    /// Builds a policy and evaluates its cost `Σₖ Δt (tr(KₖΣₖKₖᵀ) + ‖vₖ‖²)` over the
    /// left endpoints of the grid.
    pub fn new(gains: Vec<Mat>, feedforward: Vec<Vector>, means: Vec<Vector>, covariances: Vec<Mat>, dt: f64) -> Self {
        let cost = policy_cost(&gains, &feedforward, &covariances, dt);
        Self {
            gains,
            feedforward,
            means,
            covariances,
            cost,
        }
    }

    pub fn knot_count(&self) -> usize {
        self.means.len()
    }

    pub fn gains(&self) -> &[Mat] {
        &self.gains
    }

    pub fn feedforward(&self) -> &[Vector] {
        &self.feedforward
    }

    pub fn means(&self) -> &[Vector] {
        &self.means
    }

    pub fn covariances(&self) -> &[Mat] {
        &self.covariances
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn moments(&self, k: usize) -> Result<Gaussian> {
        Gaussian::new(self.means[k].clone(), self.covariances[k].clone())
    }

    pub fn control(&self, k: usize, x: &Vector) -> Vector {
        &self.gains[k] * (x - &self.means[k]) + &self.feedforward[k]
    }

    /// Replaces the mean and feedforward trajectories and re-evaluates the cost.
    pub fn with_mean_part(&self, means: Vec<Vector>, feedforward: Vec<Vector>, dt: f64) -> Self {
        Self::new(self.gains.clone(), feedforward, means, self.covariances.clone(), dt)
    }

    /// Shifts every mean by `xbar` and every feedforward by `ubar`.
    pub fn shifted(&self, xbar: &[Vector], ubar: &[Vector], dt: f64) -> Self {
        let means = self.means.iter().zip(xbar).map(|(m, x)| m + x).collect();
        let ff = self.feedforward.iter().zip(ubar).map(|(v, u)| v + u).collect();
        self.with_mean_part(means, ff, dt)
    }

    /// Largest value of `ℓᵀΣℓ + aᵀμ + b` over the enforced knots (≤ 0 when satisfied).
    pub fn max_constraint_value(&self, constraints: &[LinearizedConstraint], grid: &TimeGrid) -> f64 {
        constraints
            .iter()
            .flat_map(|c| c.window.knots(grid).map(move |k| c.value(&self.covariances[k], &self.means[k])))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV with one row per knot: t, K (row-major), v, μ, Σ (lower triangle).
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, mut w: W) -> std::io::Result<()> {
        let (m, n) = self.gains[0].shape();
        let mut header = vec!["t".to_string()];
        header.extend((0..m).flat_map(|i| (0..n).map(move |j| format!("K{i}{j}"))));
        header.extend((0..m).map(|i| format!("v{i}")));
        header.extend((0..n).map(|i| format!("mu{i}")));
        header.extend((0..n).flat_map(|i| (0..=i).map(move |j| format!("S{i}{j}"))));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.knot_count() {
            let mut row = vec![grid.time(k)];
            let gain = &self.gains[k];
            row.extend((0..m).flat_map(|i| (0..n).map(move |j| gain[(i, j)])));
            row.extend(self.feedforward[k].iter());
            row.extend(self.means[k].iter());
            row.extend(lower_triangle(&self.covariances[k]));
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn policy_cost(gains: &[Mat], feedforward: &[Vector], covariances: &[Mat], dt: f64) -> f64 {
    let stages = covariances.len().saturating_sub(1);
    (0..stages)
        .map(|k| {
            let k_sigma_kt = &gains[k] * &covariances[k] * gains[k].transpose();
            dt * (k_sigma_kt.trace() + feedforward[k].norm_squared())
        })
        .sum()
}

/// A built steering program with its block handles.
#[derive(Debug, Clone)]
pub struct OcsProgram {
    pub program: ConicProgram,
    pub(crate) blocks: OcsBlocks,
}

pub fn build_ocs_sdp(prob: &OcsProblem<'_>) -> Result<OcsProgram> {
    prob.validate()?;
    let steps = discretize_moments(prob.sys, prob.grid)?;
    let mut program = ConicProgram::new();
    let coupling = match prob.meanfield_source {
        Some(xbar) => MeanCoupling::Fixed(xbar),
        None => MeanCoupling::Absent,
    };
    let blocks = add_ocs_blocks(
        &mut program,
        "",
        &steps,
        prob.grid,
        &prob.initial,
        &prob.terminal,
        &prob.constraints,
        coupling,
        1.0,
    )?;
    Ok(OcsProgram { program, blocks })
}

/// Solves one steering problem. `label` names it in error messages.
pub fn solve_ocs_labelled(prob: &OcsProblem<'_>, label: &str) -> Result<ConditionalPolicy> {
    let built = build_ocs_sdp(prob)?;
    let sol = built.program.solve(&prob.tolerances)?;
    sol.require_usable(label)?;
    built.blocks.recover(&sol, prob.grid.dt())
}

pub fn solve_ocs(prob: &OcsProblem<'_>) -> Result<ConditionalPolicy> {
    solve_ocs_labelled(prob, "ocs")
}

/// Mean and feedforward trajectories of a minimum-energy mean transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanSteering {
    pub means: Vec<Vector>,
    pub feedforward: Vec<Vector>,
    pub cost: f64,
}

/// Continuous-time minimum-energy mean transfer evaluated at the knots.
///
/// The cost is reported exactly as `rᵀ M(1,0)⁻¹ r` with `r = μ₁ − Φ(1,0)μ₀`, which is the
/// integral of `‖v‖²` in closed form.
pub fn mean_feedforward_closed_form(
    sys: &LtvSystem,
    grid: &TimeGrid,
    mu0: &Vector,
    mu1: &Vector,
    use_meanfield_matrix: bool,
) -> Result<MeanSteering> {
    sys.check_controllable(grid, use_meanfield_matrix)?;
    let n = sys.n();
    if mu0.len() != n || mu1.len() != n {
        return Err(Error::dim("boundary means", n, mu0.len().max(mu1.len())));
    }
    let tb = TransitionBundle::new(sys, grid, use_meanfield_matrix)?;
    let gram_inv = |rhs: &Vector| -> Result<Vector> {
        let sol = solve_spd(tb.gram_10(), &Mat::from_column_slice(n, 1, rhs.as_slice()), "Grammian M(1,0)")?;
        Ok(sol.column(0).into_owned())
    };
    let r = mu1 - tb.phi_10() * mu0;
    let y = gram_inv(&r)?;
    let w = gram_inv(&(tb.phi_10() * mu0))?;
    let mut means = Vec::with_capacity(grid.len());
    let mut feedforward = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let phi_1t = &tb.phi_to_end[k];
        let phi_t1 = phi_1t
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical(format!("singular transition matrix at knot {k}")))?;
        let z = gram_inv(mu1)?;
        let mu = phi_t1 * &tb.gram_to_end[k] * &w + &tb.gram_from_start[k] * phi_1t.transpose() * z;
        means.push(mu);
        feedforward.push(sys.b(k.min(grid.last() - 1)).transpose() * phi_1t.transpose() * &y);
    }
    Ok(MeanSteering {
        means,
        feedforward,
        cost: r.dot(&y),
    })
}

/// Minimum-energy mean transfer for the Euler recursion
/// `μₖ₊₁ = μₖ + Δt (Aₖμₖ + Āₖx̄ₖ + Bₖvₖ)` with cost `Σₖ Δt ‖vₖ‖²`.
///
/// With `use_meanfield_matrix` the drift is `A + Ā` and `xbar` must be absent; with
/// `xbar` given the Ā term is known data. The solution is exact for the discrete problem.
pub fn discrete_mean_steering(
    sys: &LtvSystem,
    grid: &TimeGrid,
    mu0: &Vector,
    mu1: &Vector,
    use_meanfield_matrix: bool,
    xbar: Option<&[Vector]>,
) -> Result<MeanSteering> {
    sys.check_grid(grid)?;
    let n = sys.n();
    let knots = grid.len();
    let dt = grid.dt();
    let steps = knots - 1;
    let transition: Vec<Mat> = (0..steps)
        .map(|k| Mat::identity(n, n) + sys.drift(k, use_meanfield_matrix) * dt)
        .collect();
    let forcing: Vec<Vector> = (0..steps)
        .map(|k| match xbar {
            Some(xb) => sys.abar(k) * &xb[k] * dt,
            None => Vector::zeros(n),
        })
        .collect();
    // tail[k] = F_{T−2} ⋯ F_{k+1}, the map from μₖ₊₁ to the final mean.
    let mut tail = vec![Mat::identity(n, n); steps];
    for k in (0..steps.saturating_sub(1)).rev() {
        tail[k] = &tail[k + 1] * &transition[k + 1];
    }
    let full = if steps == 0 { Mat::identity(n, n) } else { &tail[0] * &transition[0] };
    let mut gram = Mat::zeros(n, n);
    let mut r = mu1 - &full * mu0;
    for k in 0..steps {
        let tb = &tail[k] * sys.b(k);
        gram += &tb * tb.transpose() * dt;
        r -= &tail[k] * &forcing[k];
    }
    let min_eig = min_eigenvalue(&gram);
    if !(min_eig > crate::dynamics::CONTROLLABILITY_THRESHOLD) {
        return Err(Error::Controllability(format!(
            "discrete Grammian minimum eigenvalue {min_eig:e}"
        )));
    }
    let y = solve_spd(&gram, &Mat::from_column_slice(n, 1, r.as_slice()), "discrete Grammian")?
        .column(0)
        .into_owned();
    let mut feedforward: Vec<Vector> = (0..steps).map(|k| sys.b(k).transpose() * tail[k].transpose() * &y).collect();
    let mut means = vec![mu0.clone()];
    for k in 0..steps {
        let next = &transition[k] * &means[k] + &forcing[k] + sys.b(k) * &feedforward[k] * dt;
        means.push(next);
    }
    feedforward.push(feedforward.last().cloned().unwrap_or_else(|| Vector::zeros(sys.m())));
    Ok(MeanSteering {
        means,
        feedforward,
        cost: r.dot(&y),
    })
}

/// Squared Bures–Wasserstein distance between two Gaussians.
pub fn w2_oracle(g0: &Gaussian, g1: &Gaussian) -> f64 {
    let root0 = sqrtm_psd(g0.cov());
    let cross = sqrtm_psd(&(&root0 * g1.cov() * &root0));
    (g0.mean() - g1.mean()).norm_squared() + (g0.cov() + g1.cov() - cross * 2.0).trace()
}
