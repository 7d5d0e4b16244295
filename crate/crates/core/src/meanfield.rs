//! Full mean-field bridge solves.
//!
//! Without chance constraints the problem splits: the population mean is steered on its
//! own by `(A + Ā, B)`, the boundary mixtures are centered, and every centered pair is an
//! ordinary steering problem coupled only through the transport plan. With constraints
//! the pairs share the mean trajectory, so for a fixed plan they are solved as one conic
//! program, and the plan and policies are updated alternately.

use rayon::prelude::*;

use crate::chance::{allocate_budget, linearize, ChanceSpec, KnotWindow, LinearizedConstraint, Obstacle, Route};
use crate::conic::{AffExpr, BlockShape, ConicProgram, SolveStatus, Tolerances};
use crate::dynamics::{discretize_moments, mat, LtvSystem, TimeGrid};
use crate::error::{Error, Result};
use crate::gaussmix::{Gaussian, GaussianMixture};
use crate::linalg::{Mat, Vector};
use crate::mixture::MixtureSolution;
use crate::ocs::{
    add_ocs_blocks, discrete_mean_steering, solve_ocs_labelled, ConditionalPolicy, MeanCoupling, OcsProblem,
};
use crate::transport::{solve_plan, CostTensor, TransportPlan};

/// Bound on the decomposition residual Σ λ μ̃ and Σ λ ṽ.
pub const CENTERING_TOLERANCE: f64 = 1e-6;

/// Eigenvalue floor applied to linearization references.
const REFERENCE_FLOOR: f64 = 1e-6;

/// Attempts at shrinking the references when a linearized program is infeasible.
const REFERENCE_RETRIES: usize = 4;
const REFERENCE_SHRINK: f64 = 0.25;

/// Cost assigned to pairs whose constrained problem is infeasible, relative to the
/// largest finite cost.
const INFEASIBLE_COST_FACTOR: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct Scenario {
    pub sys: LtvSystem,
    pub grid: TimeGrid,
    pub rho0: GaussianMixture,
    pub rho1: GaussianMixture,
    pub obstacles: Vec<Obstacle>,
    pub routes: Vec<Route>,
    pub chance: Option<ChanceSpec>,
}

impl Scenario {
    /// Unconstrained scenario with the single direct route.
    pub fn new(sys: LtvSystem, grid: TimeGrid, rho0: GaussianMixture, rho1: GaussianMixture) -> Result<Self> {
        let scn = Self {
            sys,
            grid,
            rho0,
            rho1,
            obstacles: Vec::new(),
            routes: vec![Route::direct()],
            chance: None,
        };
        scn.validate()?;
        Ok(scn)
    }

    pub fn validate(&self) -> Result<()> {
        self.sys.check_grid(&self.grid)?;
        let n = self.sys.n();
        for (what, rho) in [("rho0", &self.rho0), ("rho1", &self.rho1)] {
            if rho.dim() != n {
                return Err(Error::dim(what, n, rho.dim()));
            }
        }
        if self.routes.is_empty() {
            return Err(Error::Config("scenario needs at least one route".into()));
        }
        for obs in &self.obstacles {
            if obs.faces().iter().any(|f| f.normal().len() != n) {
                return Err(Error::dim("obstacle face", n, obs.faces()[0].normal().len()));
            }
        }
        if !self.obstacles.is_empty() {
            let spec = self
                .chance
                .ok_or_else(|| Error::Config("obstacles need a chance budget".into()))?;
            spec.validate()?;
            for r in &self.routes {
                r.halfspaces(&self.obstacles, spec.window)?;
            }
        } else if self.routes.len() != 1 || !self.routes[0].face_choice.is_empty() {
            return Err(Error::Config("routes are only meaningful with obstacles".into()));
        }
        Ok(())
    }

    pub fn is_constrained(&self) -> bool {
        !self.obstacles.is_empty()
    }

    pub fn route_count(&self) -> usize {
        self.routes.len()
    }

    fn arc_count(&self) -> usize {
        self.rho0.len() * self.rho1.len() * self.routes.len()
    }

    /// (i, j, route) of arc `a`.
    fn arc(&self, a: usize) -> (usize, usize, usize) {
        let (n1, r) = (self.rho1.len(), self.routes.len());
        (a / (n1 * r), (a / r) % n1, a % r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tolerances: Tolerances,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerances: Tolerances::default(),
            max_iterations: 20,
            relative_tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    /// Decomposition path; no iteration.
    Direct,
    Converged,
    IterationCap,
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunStatus::Direct => "direct",
            RunStatus::Converged => "converged",
            RunStatus::IterationCap => "iteration_cap",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Σ λ J for the plan and costs of this iteration.
    pub bound: f64,
    /// Relative change from the previous record (NaN for the first).
    pub relative_change: f64,
    pub plan_changed: bool,
}

/// Centered conditional policies of the decomposition path with their costs.
#[derive(Debug, Clone)]
pub struct CenteredGrid {
    pub policies: Vec<ConditionalPolicy>,
    pub costs: CostTensor,
}

#[derive(Debug, Clone)]
pub struct MfsbResult {
    pub solution: MixtureSolution,
    /// Mean control ū (decomposition path only).
    pub mean_control: Option<Vec<Vector>>,
    pub iterations: Vec<IterationRecord>,
    pub status: RunStatus,
    /// Linearized rows enforced on each arc in the final solve.
    pub constraints: Vec<Vec<LinearizedConstraint>>,
    pub centered: Option<CenteredGrid>,
}

impl MfsbResult {
    pub fn mean_trajectory(&self) -> &[Vector] {
        self.solution.meanfield()
    }
}

/// Largest knot-wise norms of Σ λ μ̃ and Σ λ ṽ for centered policies under `plan`.
pub fn centering_residual(plan: &TransportPlan, policies: &[ConditionalPolicy]) -> (f64, f64) {
    let knots = policies[0].knot_count();
    let (n, m) = (policies[0].means()[0].len(), policies[0].feedforward()[0].len());
    let mut worst = (0.0f64, 0.0f64);
    for k in 0..knots {
        let mut mean = Vector::zeros(n);
        let mut ff = Vector::zeros(m);
        for (e, p) in plan.entries().zip(policies) {
            mean += &p.means()[k] * e.weight;
            ff += &p.feedforward()[k] * e.weight;
        }
        worst = (worst.0.max(mean.norm()), worst.1.max(ff.norm()));
    }
    worst
}

fn centered(rho: &GaussianMixture, shift: &Vector) -> Result<Vec<Gaussian>> {
    rho.components()
        .iter()
        .map(|g| Gaussian::new(g.mean() - shift, g.cov().clone()))
        .collect()
}

/// Solves every centered pair without the mean-field matrix.
pub fn solve_centered_grid(scn: &Scenario, opts: &SolverOptions) -> Result<CenteredGrid> {
    let (x0, x1) = (scn.rho0.mean(), scn.rho1.mean());
    let c0 = centered(&scn.rho0, &x0)?;
    let c1 = centered(&scn.rho1, &x1)?;
    let pairs: Vec<(usize, usize)> = (0..c0.len()).flat_map(|i| (0..c1.len()).map(move |j| (i, j))).collect();
    let dt = scn.grid.dt();
    let policies = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut prob = OcsProblem::new(&scn.sys, &scn.grid, c0[i].clone(), c1[j].clone());
            prob.tolerances = opts.tolerances;
            let policy = solve_ocs_labelled(&prob, &format!("pair ({i}, {j})"))?;
            // The mean part is solved exactly on the same discretization.
            let mean = discrete_mean_steering(&scn.sys, &scn.grid, c0[i].mean(), c1[j].mean(), false, None)?;
            Ok(policy.with_mean_part(mean.means, mean.feedforward, dt))
        })
        .collect::<Result<Vec<_>>>()?;
    let costs = CostTensor::new(c0.len(), c1.len(), 1, policies.iter().map(ConditionalPolicy::cost).collect())?;
    Ok(CenteredGrid { policies, costs })
}

/// Decomposition path for scenarios without chance constraints.
pub fn solve_unconstrained(scn: &Scenario, opts: &SolverOptions) -> Result<MfsbResult> {
    scn.validate()?;
    if scn.is_constrained() {
        return Err(Error::Config("scenario has chance constraints; use the alternating solver".into()));
    }
    scn.sys.check_controllable(&scn.grid, false)?;
    scn.sys.check_controllable(&scn.grid, true)?;
    let (x0, x1) = (scn.rho0.mean(), scn.rho1.mean());
    let mean = discrete_mean_steering(&scn.sys, &scn.grid, &x0, &x1, true, None)?;
    let grid_solution = solve_centered_grid(scn, opts)?;
    let plan = solve_plan(&grid_solution.costs, scn.rho0.weights(), scn.rho1.weights())?;
    let (dm, dv) = centering_residual(&plan, &grid_solution.policies);
    if dm > CENTERING_TOLERANCE || dv > CENTERING_TOLERANCE {
        return Err(Error::Numerical(format!(
            "decomposition residuals too large: mean {dm:e}, feedforward {dv:e}"
        )));
    }
    let dt = scn.grid.dt();
    let policies: Vec<Option<ConditionalPolicy>> = grid_solution
        .policies
        .iter()
        .map(|p| Some(p.shifted(&mean.means, &mean.feedforward, dt)))
        .collect();
    let solution = MixtureSolution::new(scn.grid.clone(), plan, policies, Some(mean.means.clone()))?;
    log::info!("decomposition path: bound {:.6}", solution.bound());
    Ok(MfsbResult {
        iterations: vec![IterationRecord {
            iteration: 0,
            bound: solution.bound(),
            relative_change: f64::NAN,
            plan_changed: false,
        }],
        solution,
        mean_control: Some(mean.feedforward),
        status: RunStatus::Direct,
        constraints: vec![Vec::new(); scn.arc_count()],
        centered: Some(grid_solution),
    })
}

/// Covariance trajectories around which the chance constraints are linearized, per arc.
#[derive(Debug, Clone)]
pub struct References {
    pub cov: Vec<Vec<Mat>>,
}

impl References {
    fn floored(m: &Mat, scale: f64) -> Mat {
        let eig = nalgebra::SymmetricEigen::new(m * scale);
        let vals = eig.eigenvalues.map(|v| v.max(REFERENCE_FLOOR));
        &eig.eigenvectors * Mat::from_diagonal(&vals) * eig.eigenvectors.transpose()
    }
}

/// Linearized rows for one arc, one row per (face, knot) with the knot's reference.
fn arc_constraints(scn: &Scenario, route: usize, refs: &[Mat], scale: f64) -> Result<Vec<LinearizedConstraint>> {
    let Some(spec) = scn.chance else {
        return Ok(Vec::new());
    };
    if scn.obstacles.is_empty() {
        return Ok(Vec::new());
    }
    let faces = scn.routes[route].halfspaces(&scn.obstacles, spec.window)?;
    // λ-weights over pairs sum to one, so the union bound only has to split over faces.
    let delta = allocate_budget(&spec, 1, faces.len())?;
    let mut rows = Vec::new();
    for h in &faces {
        for k in h.window().knots(&scn.grid) {
            let single = h.with_window(KnotWindow::from_knots(&scn.grid, k, k)?);
            rows.push(linearize(&single, delta, &References::floored(&refs[k], scale))?);
        }
    }
    Ok(rows)
}

/// Outcome of the coupled solve at a fixed plan.
#[derive(Debug, Clone)]
pub struct FixedPlanSolve {
    /// Policies per arc; `None` where the arc's own problem is infeasible.
    pub policies: Vec<Option<ConditionalPolicy>>,
    pub meanfield: Vec<Vector>,
    /// Σ λ J over the active arcs.
    pub objective: f64,
    pub constraints: Vec<Vec<LinearizedConstraint>>,
}

fn boundary(scn: &Scenario, a: usize) -> (Gaussian, Gaussian) {
    let (i, j, _) = scn.arc(a);
    (scn.rho0.components()[i].clone(), scn.rho1.components()[j].clone())
}

/// Solves all arcs with positive mass as one program sharing the mean trajectory, then
/// every other arc on its own against that trajectory.
pub fn solve_constrained_fixed_plan(
    scn: &Scenario,
    plan: &TransportPlan,
    refs: &References,
    opts: &SolverOptions,
) -> Result<FixedPlanSolve> {
    scn.validate()?;
    let arcs = scn.arc_count();
    if plan.weights().len() != arcs || refs.cov.len() != arcs {
        return Err(Error::dim("plan or references", arcs, plan.weights().len()));
    }
    let steps = discretize_moments(&scn.sys, &scn.grid)?;
    let knots = scn.grid.len();
    let n = scn.sys.n();
    let dt = scn.grid.dt();
    let active: Vec<usize> = (0..arcs).filter(|&a| plan.weights()[a] > 0.0).collect();

    let mut scale = 1.0;
    let mut joint = None;
    for attempt in 0..=REFERENCE_RETRIES {
        let constraints: Vec<Vec<LinearizedConstraint>> = active
            .iter()
            .map(|&a| arc_constraints(scn, scn.arc(a).2, &refs.cov[a], scale))
            .collect::<Result<_>>()?;
        let mut prog = ConicProgram::new();
        let xbar: Vec<_> = (0..knots)
            .map(|k| prog.add_block(format!("xbar[{k}]"), BlockShape::Vector(n)))
            .collect::<Result<_>>()?;
        let mut blocks = Vec::with_capacity(active.len());
        for (c, &a) in active.iter().enumerate() {
            let (g0, g1) = boundary(scn, a);
            blocks.push(add_ocs_blocks(
                &mut prog,
                &format!("arc{a}/"),
                &steps,
                &scn.grid,
                &g0,
                &g1,
                &constraints[c],
                MeanCoupling::Shared(&xbar),
                plan.weights()[a],
            )?);
        }
        for (k, id) in xbar.iter().enumerate() {
            for i in 0..n {
                let mut row = prog.elem(*id, i);
                for (b, &a) in blocks.iter().zip(&active) {
                    row.add_scaled(&prog.elem(b.mean[k], i), -plan.weights()[a]);
                }
                prog.add_equality(row + AffExpr::zero());
            }
        }
        let sol = prog.solve(&opts.tolerances)?;
        match sol.status {
            SolveStatus::Optimal => {
                joint = Some((sol, xbar, blocks, constraints));
                break;
            }
            SolveStatus::Infeasible if attempt < REFERENCE_RETRIES => {
                log::info!("coupled program infeasible; shrinking references (attempt {})", attempt + 1);
                scale *= REFERENCE_SHRINK;
            }
            status => {
                return Err(if status == SolveStatus::Infeasible {
                    Error::Infeasible("coupled program at the current plan".into())
                } else {
                    Error::Solver {
                        label: "coupled program".into(),
                        status: status.to_string(),
                    }
                })
            }
        }
    }
    let (sol, xbar_ids, blocks, active_constraints) = joint.expect("loop either breaks or returns");
    let meanfield: Vec<Vector> = xbar_ids.iter().map(|id| sol.vector(*id)).collect();

    let mut policies: Vec<Option<ConditionalPolicy>> = vec![None; arcs];
    let mut constraints: Vec<Vec<LinearizedConstraint>> = vec![Vec::new(); arcs];
    let mut objective = 0.0;
    for ((b, &a), rows) in blocks.iter().zip(&active).zip(active_constraints) {
        let policy = b.recover(&sol, dt)?;
        objective += plan.weights()[a] * policy.cost();
        policies[a] = Some(policy);
        constraints[a] = rows;
    }

    let idle: Vec<usize> = (0..arcs).filter(|a| plan.weights()[*a] <= 0.0).collect();
    let solved: Vec<(usize, Option<(ConditionalPolicy, Vec<LinearizedConstraint>)>)> = idle
        .par_iter()
        .map(|&a| solve_single_arc(scn, a, &refs.cov[a], Some(&meanfield), opts).map(|r| (a, r)))
        .collect::<Result<_>>()?;
    for (a, r) in solved {
        if let Some((p, rows)) = r {
            policies[a] = Some(p);
            constraints[a] = rows;
        }
    }
    Ok(FixedPlanSolve {
        policies,
        meanfield,
        objective,
        constraints,
    })
}

/// One arc against a known mean trajectory; `None` when infeasible after all retries.
fn solve_single_arc(
    scn: &Scenario,
    a: usize,
    refs: &[Mat],
    meanfield: Option<&[Vector]>,
    opts: &SolverOptions,
) -> Result<Option<(ConditionalPolicy, Vec<LinearizedConstraint>)>> {
    let (i, j, r) = scn.arc(a);
    let (g0, g1) = boundary(scn, a);
    let mut scale = 1.0;
    for _ in 0..=REFERENCE_RETRIES {
        let mut prob = OcsProblem::new(&scn.sys, &scn.grid, g0.clone(), g1.clone());
        prob.tolerances = opts.tolerances;
        prob.meanfield_source = meanfield;
        prob.constraints = arc_constraints(scn, r, refs, scale)?;
        match solve_ocs_labelled(&prob, &format!("pair ({i}, {j}, route {r})")) {
            Ok(p) => return Ok(Some((p, prob.constraints))),
            Err(e) if e.is_infeasible() => scale *= REFERENCE_SHRINK,
            Err(e) => return Err(e),
        }
    }
    log::info!("pair ({i}, {j}, route {r}) is infeasible");
    Ok(None)
}

/// Costs per arc with infeasible arcs priced out of the plan.
fn cost_tensor(scn: &Scenario, policies: &[Option<ConditionalPolicy>]) -> Result<(CostTensor, f64)> {
    let finite_max = policies
        .iter()
        .flatten()
        .map(ConditionalPolicy::cost)
        .fold(0.0f64, f64::max);
    let penalty = INFEASIBLE_COST_FACTOR * finite_max.max(1.0);
    let values = policies
        .iter()
        .map(|p| p.as_ref().map_or(penalty, ConditionalPolicy::cost))
        .collect();
    Ok((
        CostTensor::new(scn.rho0.len(), scn.rho1.len(), scn.routes.len(), values)?,
        penalty,
    ))
}

fn plan_for(scn: &Scenario, policies: &[Option<ConditionalPolicy>]) -> Result<TransportPlan> {
    let (costs, _) = cost_tensor(scn, policies)?;
    let plan = solve_plan(&costs, scn.rho0.weights(), scn.rho1.weights())?;
    if let Some(e) = plan.active().find(|e| policies[costs.index(e.i, e.j, e.route)].is_none()) {
        return Err(Error::Infeasible(format!(
            "no feasible route for initial component {} to terminal component {}",
            e.i, e.j
        )));
    }
    Ok(plan)
}

/// Alternates between the transport plan and the coupled policy solve.
pub fn alternate_optimize(scn: &Scenario, opts: &SolverOptions) -> Result<MfsbResult> {
    scn.validate()?;
    scn.sys.check_controllable(&scn.grid, false)?;
    scn.sys.check_controllable(&scn.grid, true)?;
    let arcs = scn.arc_count();
    let routes = scn.routes.len();

    // References from the unconstrained centered pairs; initial costs from single
    // constrained solves against the decomposition's mean trajectory.
    let centered_grid = solve_centered_grid(scn, opts)?;
    let mut refs = References {
        cov: (0..arcs)
            .map(|a| {
                let (i, j, _) = scn.arc(a);
                centered_grid.policies[i * scn.rho1.len() + j].covariances().to_vec()
            })
            .collect(),
    };
    let xbar0 = discrete_mean_steering(&scn.sys, &scn.grid, &scn.rho0.mean(), &scn.rho1.mean(), true, None)?.means;
    let initial: Vec<Option<ConditionalPolicy>> = (0..arcs)
        .into_par_iter()
        .map(|a| solve_single_arc(scn, a, &refs.cov[a], Some(&xbar0), opts).map(|r| r.map(|(p, _)| p)))
        .collect::<Result<_>>()?;
    for (a, p) in initial.iter().enumerate() {
        if let Some(p) = p {
            refs.cov[a] = p.covariances().to_vec();
        }
    }
    let mut plan = plan_for(scn, &initial)?;
    let mut log = vec![IterationRecord {
        iteration: 0,
        bound: plan.objective(),
        relative_change: f64::NAN,
        plan_changed: true,
    }];
    log::info!("alternation start: bound {:.6} over {arcs} arcs ({routes} routes)", plan.objective());

    let mut status = RunStatus::IterationCap;
    let mut last: Option<(TransportPlan, FixedPlanSolve)> = None;
    for iteration in 1..=opts.max_iterations {
        let solve = solve_constrained_fixed_plan(scn, &plan, &refs, opts).map_err(|e| match e {
            Error::Infeasible(msg) => Error::Infeasible(format!("iteration {iteration}: {msg}")),
            other => other,
        })?;
        let previous = log.last().expect("log starts with the initial record").bound;
        let change = (solve.objective - previous).abs() / previous.abs().max(f64::MIN_POSITIVE);
        for (a, p) in solve.policies.iter().enumerate() {
            if let Some(p) = p {
                refs.cov[a] = p.covariances().to_vec();
            }
        }
        let next = plan_for(scn, &solve.policies)?;
        let plan_changed = next.weights() != plan.weights();
        log.push(IterationRecord {
            iteration,
            bound: solve.objective,
            relative_change: change,
            plan_changed,
        });
        log::info!("iteration {iteration}: bound {:.6}, relative change {change:.3e}", solve.objective);
        let done = change < opts.relative_tolerance;
        last = Some((plan.clone(), solve));
        if done {
            status = RunStatus::Converged;
            break;
        }
        plan = next;
    }
    // The returned policies always come from a solve at the plan they are paired with.
    let (final_plan, final_solve) = match last {
        Some((p, s)) if status == RunStatus::Converged || p.weights() == plan.weights() => (p, s),
        _ => {
            let s = solve_constrained_fixed_plan(scn, &plan, &refs, opts)?;
            (plan, s)
        }
    };
    let (costs, _) = cost_tensor(scn, &final_solve.policies)?;
    let final_plan = TransportPlan::from_lambda(&costs, scn.rho0.weights(), scn.rho1.weights(), final_plan.weights().to_vec())?;
    let solution = MixtureSolution::new(
        scn.grid.clone(),
        final_plan,
        final_solve.policies,
        Some(final_solve.meanfield),
    )?;
    Ok(MfsbResult {
        solution,
        mean_control: None,
        iterations: log,
        status,
        constraints: final_solve.constraints,
        centered: None,
    })
}

/// Picks the decomposition path when there are no obstacles and alternation otherwise.
pub fn solve(scn: &Scenario, opts: &SolverOptions) -> Result<MfsbResult> {
    if scn.is_constrained() {
        alternate_optimize(scn, opts)
    } else {
        solve_unconstrained(scn, opts)
    }
}

/// A = Ā = B = D = I₂.
pub fn problem1_system(knots: usize) -> Result<LtvSystem> {
    let eye = Mat::identity(2, 2);
    LtvSystem::constant(eye.clone(), eye.clone(), eye.clone(), eye, knots)
}

/// Planar agents with position and velocity: A = [[0, I], [I, 0]], Ā = [[0, 0], [−I, 0]],
/// B = [0; I], D = I₄, reproduced as published.
pub fn problem2_system(knots: usize) -> Result<LtvSystem> {
    #[rustfmt::skip]
    let a = mat(4, 4, &[
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
    ]);
    #[rustfmt::skip]
    let abar = mat(4, 4, &[
        0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
        -1.0, 0.0, 0.0, 0.0,
        0.0, -1.0, 0.0, 0.0,
    ]);
    let b = mat(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    LtvSystem::constant(a, abar, b, Mat::identity(4, 4), knots)
}
