//! Euler–Maruyama simulation of the controlled swarm with an empirical mean field.
//!
//! Every agent owns a ChaCha8 stream selected by its index, drawn once for the initial
//! state and then for each noise increment, so results do not depend on how agents are
//! split across threads. The empirical mean is recomputed at every knot over all agents.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{inverse_sym_floored, Mat, Vector};
use crate::meanfield::Scenario;
use crate::mixture::MixtureSolution;

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmRun {
    pub agent_count: usize,
    pub seed: u64,
    /// `states[k][i]`.
    pub states: Vec<Vec<Vector>>,
    /// `controls[k][i]`, held over stage k; the final knot's entry is recorded but unused.
    pub controls: Vec<Vec<Vector>>,
    pub empirical_mean: Vec<Vector>,
}

fn average(xs: &[Vector]) -> Vector {
    let n = xs[0].len();
    xs.iter().fold(Vector::zeros(n), |acc, x| acc + x) / xs.len() as f64
}

/// Simulates `agents` agents from `rho0` under the mixture policy of `sol`.
pub fn simulate_swarm(scn: &Scenario, sol: &MixtureSolution, agents: usize, seed: u64) -> Result<SwarmRun> {
    if agents < 2 {
        return Err(Error::Input(format!("swarm needs at least 2 agents, got {agents}")));
    }
    if sol.grid().len() != scn.grid.len() {
        return Err(Error::dim("solution grid", scn.grid.len(), sol.grid().len()));
    }
    let grid = &scn.grid;
    let sys = &scn.sys;
    let (n, q) = (sys.n(), sys.q());
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    let mut rngs: Vec<ChaCha8Rng> = (0..agents)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            rng
        })
        .collect();
    let mut x: Vec<Vector> = rngs
        .par_iter_mut()
        .map(|rng| scn.rho0.sample_with(1, rng).pop().expect("one sample"))
        .collect();

    let knots = grid.len();
    let mut states = Vec::with_capacity(knots);
    let mut controls = Vec::with_capacity(knots);
    let mut empirical_mean = Vec::with_capacity(knots);
    for k in 0..knots {
        let xbar = average(&x);
        let u: Vec<Vector> = x.par_iter().map(|xi| sol.policy_eval(k, xi)).collect::<Result<_>>()?;
        if k + 1 < knots {
            let forcing = sys.abar(k) * &xbar;
            let (a, b, d) = (sys.a(k), sys.b(k), sys.d(k));
            let next: Vec<Vector> = x
                .par_iter()
                .zip(&u)
                .zip(rngs.par_iter_mut())
                .map(|((xi, ui), rng)| {
                    let z = Vector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
                    xi + (a * xi + &forcing + b * ui) * dt + d * z * sqrt_dt
                })
                .collect();
            if let Some(agent) = next.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
                return Err(Error::Divergence { knot: k + 1, agent });
            }
            states.push(std::mem::replace(&mut x, next));
        } else {
            states.push(std::mem::take(&mut x));
        }
        controls.push(u);
        empirical_mean.push(xbar);
    }
    debug_assert!(states.iter().all(|s| s.len() == agents && s[0].len() == n));
    Ok(SwarmRun {
        agent_count: agents,
        seed,
        states,
        controls,
        empirical_mean,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmMetrics {
    /// Mean realized control energy per agent.
    pub cost: f64,
    pub cost_std_error: f64,
    pub max_violation: f64,
    /// Fraction of agents inside some obstacle, per knot.
    pub violation: Vec<f64>,
    /// Distance between each target component mean and the mean of the agents assigned to it.
    pub terminal_mean_error: Vec<f64>,
    /// Fraction of agents assigned to each target component.
    pub terminal_frequency: Vec<f64>,
}

impl SwarmMetrics {
    /// Binomial standard error of the worst violation fraction.
    pub fn violation_std_error(&self, agents: usize) -> f64 {
        let p = self.max_violation;
        (p * (1.0 - p) / agents as f64).sqrt()
    }
}

/// Realized cost, obstacle violation, and terminal matching error of a run.
pub fn estimate_metrics(run: &SwarmRun, scn: &Scenario) -> Result<SwarmMetrics> {
    let knots = run.states.len();
    if knots != scn.grid.len() {
        return Err(Error::dim("run knots", scn.grid.len(), knots));
    }
    let dt = scn.grid.dt();
    let n = run.agent_count as f64;
    let per_agent: Vec<f64> = (0..run.agent_count)
        .map(|i| run.controls[..knots - 1].iter().map(|u| u[i].norm_squared() * dt).sum())
        .collect();
    let cost = per_agent.iter().sum::<f64>() / n;
    let var = per_agent.iter().map(|c| (c - cost).powi(2)).sum::<f64>() / (n - 1.0);

    let violation: Vec<f64> = run
        .states
        .iter()
        .map(|xs| {
            let inside = xs
                .iter()
                .filter(|x| scn.obstacles.iter().any(|o| o.contains(x)))
                .count();
            inside as f64 / n
        })
        .collect();
    let max_violation = violation.iter().copied().fold(0.0, f64::max);

    let targets = scn.rho1.components();
    let precisions: Vec<Mat> = targets.iter().map(|g| inverse_sym_floored(g.cov(), 1e-12).0).collect();
    let dim = scn.sys.n();
    let mut sums = vec![Vector::zeros(dim); targets.len()];
    let mut counts = vec![0usize; targets.len()];
    for x in &run.states[knots - 1] {
        let nearest = targets
            .iter()
            .zip(&precisions)
            .map(|(g, p)| {
                let d = x - g.mean();
                d.dot(&(p * &d))
            })
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(j, _)| j)
            .expect("at least one target component");
        sums[nearest] += x;
        counts[nearest] += 1;
    }
    let terminal_mean_error = targets
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(g, (s, &c))| if c == 0 { f64::INFINITY } else { (s / c as f64 - g.mean()).norm() })
        .collect();
    let terminal_frequency = counts.iter().map(|&c| c as f64 / n).collect();
    Ok(SwarmMetrics {
        cost,
        cost_std_error: (var / n).sqrt(),
        max_violation,
        violation,
        terminal_mean_error,
        terminal_frequency,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub realized: f64,
    pub bound: f64,
    pub std_error: f64,
    pub holds: bool,
}

/// Whether the realized cost stays below the transport bound up to three standard errors.
pub fn estimate_bound_check(metrics: &SwarmMetrics, sol: &MixtureSolution) -> BoundCheck {
    let bound = sol.bound();
    BoundCheck {
        realized: metrics.cost,
        bound,
        std_error: metrics.cost_std_error,
        holds: metrics.cost <= bound + 3.0 * metrics.cost_std_error,
    }
}

/// Per-knot violation predicted by the flow: Σ λ times the tail mass beyond each enforced
/// face of the pair's route.
pub fn predicted_violation(scn: &Scenario, sol: &MixtureSolution) -> Result<Vec<f64>> {
    let mut out = vec![0.0; scn.grid.len()];
    let Some(spec) = scn.chance else {
        return Ok(out);
    };
    for (e, p) in sol.active() {
        for h in scn.routes[e.route].halfspaces(&scn.obstacles, spec.window)? {
            for k in h.window().knots(&scn.grid) {
                out[k] += e.weight * h.tail_probability(&p.moments(k)?);
            }
        }
    }
    Ok(out)
}

/// Trajectory CSV with every `thin`-th agent: `knot,time,agent,x0..,u0..`.
pub fn write_trajectories_csv<W: Write>(run: &SwarmRun, scn: &Scenario, thin: usize, mut w: W) -> std::io::Result<()> {
    let thin = thin.max(1);
    let (n, m) = (scn.sys.n(), scn.sys.m());
    let mut header = vec!["knot".to_string(), "time".into(), "agent".into()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (k, (xs, us)) in run.states.iter().zip(&run.controls).enumerate() {
        for i in (0..run.agent_count).step_by(thin) {
            let mut cells = vec![k.to_string(), format!("{:.17e}", scn.grid.time(k)), i.to_string()];
            cells.extend(xs[i].iter().chain(us[i].iter()).map(|v| format!("{v:.17e}")));
            writeln!(w, "{}", cells.join(","))?;
        }
    }
    Ok(())
}
