//! Mixture feedback policy assembled from conditional policies and a transport plan.
//!
//! At knot k the policy is the density-weighted average of the conditional policies,
//! with weights `λ ρₖ|ᵢⱼ(x) / Σ λ ρₖ|ᵢⱼ(x)` computed in the log domain. The flow is the
//! λ-weighted mixture of the conditional moment trajectories.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};
use crate::gaussmix::{log_sum_exp, Gaussian, GaussianMixture, LogDensity};
use crate::linalg::{lower_triangle, psd_factor, Vector};
use crate::ocs::ConditionalPolicy;
use crate::transport::{CostTensor, PlanEntry, TransportPlan};

/// Eigenvalue floor for conditional densities at knots where a covariance is singular.
pub const DENSITY_EIGEN_FLOOR: f64 = 1e-9;

/// Samples per deterministic work unit of the gap estimator.
const GAP_CHUNK: usize = 4096;

#[derive(Debug, Clone)]
struct Active {
    entry: PlanEntry,
    arc: usize,
    log_weight: f64,
}

#[derive(Debug, Clone)]
pub struct MixtureSolution {
    grid: TimeGrid,
    plan: TransportPlan,
    policies: Vec<Option<ConditionalPolicy>>,
    meanfield: Vec<Vector>,
    active: Vec<Active>,
    /// `densities[k][c]` for active component c.
    densities: Vec<Vec<LogDensity>>,
}

impl MixtureSolution {
    /// Assembles a solution. `policies` is indexed like the plan entries and must hold a
    /// policy for every entry with positive mass; plan costs are replaced by the policy
    /// costs wherever a policy is present. Without `meanfield` the trajectory is Σ λ μ.
    pub fn new(
        grid: TimeGrid,
        plan: TransportPlan,
        policies: Vec<Option<ConditionalPolicy>>,
        meanfield: Option<Vec<Vector>>,
    ) -> Result<Self> {
        let (n0, n1, routes) = plan.shape();
        if policies.len() != n0 * n1 * routes {
            return Err(Error::dim("conditional policies", n0 * n1 * routes, policies.len()));
        }
        let costs: Vec<f64> = plan
            .entries()
            .zip(&policies)
            .map(|(e, p)| p.as_ref().map_or(e.cost, ConditionalPolicy::cost))
            .collect();
        let tensor = CostTensor::new(n0, n1, routes, costs)?;
        let plan = TransportPlan::from_lambda(&tensor, plan.alpha0(), plan.alpha1(), plan.weights().to_vec())?;

        let mut active = Vec::new();
        for (arc, e) in plan.entries().enumerate() {
            if e.weight <= 0.0 {
                continue;
            }
            let policy = policies[arc].as_ref().ok_or_else(|| {
                Error::Input(format!("no policy for active pair ({}, {}, route {})", e.i, e.j, e.route))
            })?;
            if policy.knot_count() != grid.len() {
                return Err(Error::dim("conditional policy knots", grid.len(), policy.knot_count()));
            }
            active.push(Active {
                entry: e,
                arc,
                log_weight: e.weight.ln(),
            });
        }
        let densities = (0..grid.len())
            .map(|k| {
                active
                    .iter()
                    .map(|a| {
                        let g = policies[a.arc].as_ref().expect("checked above").moments(k)?;
                        LogDensity::floored(&g, DENSITY_EIGEN_FLOOR)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sol = Self {
            grid,
            plan,
            policies,
            meanfield: Vec::new(),
            active,
            densities,
        };
        sol.meanfield = match meanfield {
            Some(m) => {
                if m.len() != sol.grid.len() {
                    return Err(Error::dim("mean-field trajectory", sol.grid.len(), m.len()));
                }
                m
            }
            None => sol.flow_means(),
        };
        Ok(sol)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn plan(&self) -> &TransportPlan {
        &self.plan
    }

    /// Upper bound Σ λ J on the mixture policy cost.
    pub fn bound(&self) -> f64 {
        self.plan.objective()
    }

    pub fn meanfield(&self) -> &[Vector] {
        &self.meanfield
    }

    pub fn policy(&self, i: usize, j: usize, route: usize) -> Option<&ConditionalPolicy> {
        let (_, n1, routes) = self.plan.shape();
        self.policies[(i * n1 + j) * routes + route].as_ref()
    }

    pub fn policies(&self) -> &[Option<ConditionalPolicy>] {
        &self.policies
    }

    /// Active plan entries paired with their policies.
    pub fn active(&self) -> impl Iterator<Item = (PlanEntry, &ConditionalPolicy)> + '_ {
        self.active
            .iter()
            .map(|a| (a.entry, self.policies[a.arc].as_ref().expect("active policy")))
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    /// Σ λ μₖ at every knot.
    pub fn flow_means(&self) -> Vec<Vector> {
        let n = self.densities_dim();
        (0..self.grid.len())
            .map(|k| {
                self.active().fold(Vector::zeros(n), |acc, (e, p)| acc + &p.means()[k] * e.weight)
            })
            .collect()
    }

    fn densities_dim(&self) -> usize {
        self.active().next().map_or(0, |(_, p)| p.means()[0].len())
    }

    /// Normalized mixture weights of the active components at `(k, x)`.
    pub fn mixture_weights(&self, k: usize, x: &Vector) -> Result<Vec<f64>> {
        let logs: Vec<f64> = self
            .active
            .iter()
            .zip(&self.densities[k])
            .map(|(a, d)| a.log_weight + d.eval(x))
            .collect();
        let total = log_sum_exp(&logs);
        if !total.is_finite() {
            return Err(Error::Evaluation(format!(
                "mixture weights vanish at knot {k}, x = {:?}",
                x.as_slice()
            )));
        }
        Ok(logs.iter().map(|l| (l - total).exp()).collect())
    }

    /// Mixture feedback `u_k(x)`.
    pub fn policy_eval(&self, k: usize, x: &Vector) -> Result<Vector> {
        let weights = self.mixture_weights(k, x)?;
        let m = self.control_dim();
        Ok(self
            .active()
            .zip(&weights)
            .fold(Vector::zeros(m), |acc, ((_, p), w)| acc + p.control(k, x) * *w))
    }

    fn control_dim(&self) -> usize {
        self.active().next().map_or(0, |(_, p)| p.feedforward()[0].len())
    }

    /// The probability flow at knot k.
    pub fn flow_density(&self, k: usize) -> Result<GaussianMixture> {
        let (weights, comps): (Vec<f64>, Vec<Gaussian>) = self
            .active()
            .map(|(e, p)| p.moments(k).map(|g| (e.weight, g)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let total: f64 = weights.iter().sum();
        GaussianMixture::new(weights.iter().map(|w| w / total).collect(), comps)
    }

    /// Monte-Carlo estimate of the tightness gap `J_OT − J_GMM`.
    ///
    /// Each sample draws a stage uniformly, a pair from λ, and a state from that pair's
    /// conditional density, and records `‖u_ij(x) − u(x)‖²`. Samples are produced in fixed
    /// chunks with their own streams, so the result does not depend on the thread count.
    pub fn bound_and_gap(&self, samples: usize, seed: u64) -> Result<GapEstimate> {
        let bound = self.bound();
        if samples == 0 {
            return Err(Error::Input("gap estimation needs at least one sample".into()));
        }
        if self.active.len() == 1 {
            return Ok(GapEstimate {
                bound,
                gap: 0.0,
                std_error: 0.0,
                samples,
            });
        }
        let stages = self.grid.len() - 1;
        let picker = WeightedIndex::new(self.active.iter().map(|a| a.entry.weight)).map_err(|e| {
            Error::Input(format!("invalid plan weights: {e}"))
        })?;
        let factors: Vec<Vec<_>> = (0..stages)
            .map(|k| self.active().map(|(_, p)| psd_factor(&p.covariances()[k])).collect())
            .collect();
        let chunks = samples.div_ceil(GAP_CHUNK);
        let partial: Vec<(f64, f64)> = (0..chunks)
            .into_par_iter()
            .map(|c| -> Result<(f64, f64)> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                let count = GAP_CHUNK.min(samples - c * GAP_CHUNK);
                let (mut s1, mut s2) = (0.0, 0.0);
                for _ in 0..count {
                    let k = rng.random_range(0..stages);
                    let c = picker.sample(&mut rng);
                    let p = self.policies[self.active[c].arc].as_ref().expect("active policy");
                    let n = p.means()[k].len();
                    let z = Vector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let x = &p.means()[k] + &factors[k][c] * z;
                    let d = (p.control(k, &x) - self.policy_eval(k, &x)?).norm_squared();
                    s1 += d;
                    s2 += d * d;
                }
                Ok((s1, s2))
            })
            .collect::<Result<Vec<_>>>()?;
        let (s1, s2) = partial.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        let n = samples as f64;
        // Stage sampling is uniform and the stages tile [0, 1], so the time integral is the
        // plain sample mean.
        let horizon = stages as f64 * self.grid.dt();
        let mean = s1 / n;
        let var = if samples > 1 { ((s2 - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
        Ok(GapEstimate {
            bound,
            gap: horizon * mean,
            std_error: horizon * (var / n).sqrt(),
            samples,
        })
    }

    /// CSV of the flow at knot k: one row per active component.
    pub fn write_flow_csv<W: Write>(&self, k: usize, mut w: W) -> std::io::Result<()> {
        let n = self.densities_dim();
        let mut header = vec!["i".to_string(), "j".into(), "route".into(), "weight".into()];
        header.extend((0..n).map(|i| format!("mu{i}")));
        header.extend((0..n).flat_map(|i| (0..=i).map(move |j| format!("S{i}{j}"))));
        writeln!(w, "{}", header.join(","))?;
        for (e, p) in self.active() {
            let mut cells = vec![e.i.to_string(), e.j.to_string(), e.route.to_string(), format!("{:.17e}", e.weight)];
            cells.extend(p.means()[k].iter().map(|v| format!("{v:.17e}")));
            cells.extend(lower_triangle(&p.covariances()[k]).iter().map(|v| format!("{v:.17e}")));
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapEstimate {
    /// Σ λ J.
    pub bound: f64,
    pub gap: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl GapEstimate {
    /// Estimated cost of the mixture policy, `J_OT − gap`.
    pub fn mixture_cost(&self) -> f64 {
        self.bound - self.gap
    }
}
