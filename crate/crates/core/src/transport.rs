//! Component-level transport plans.
//!
//! The linear program `min Σ λ J` subject to row sums α₀ and column sums α₁ is solved
//! exactly by the transportation (network) simplex method. Routes become parallel arcs
//! between the same supply and demand nodes, so a plan may be a matrix (one route) or a
//! three-index tensor.

use std::collections::VecDeque;
use std::io::Write;

use crate::error::{Error, Result};

/// Tolerance for accepting marginal weights that do not sum to one exactly.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

/// Cost array indexed by (initial component, terminal component, route).
#[derive(Debug, Clone, PartialEq)]
pub struct CostTensor {
    n0: usize,
    n1: usize,
    routes: usize,
    values: Vec<f64>,
}

impl CostTensor {
    pub fn new(n0: usize, n1: usize, routes: usize, values: Vec<f64>) -> Result<Self> {
        if n0 == 0 || n1 == 0 || routes == 0 {
            return Err(Error::Input("cost tensor has an empty axis".into()));
        }
        if values.len() != n0 * n1 * routes {
            return Err(Error::dim("cost tensor", n0 * n1 * routes, values.len()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("cost entry {pos} is not finite")));
        }
        Ok(Self {
            n0,
            n1,
            routes,
            values,
        })
    }

    /// Single-route cost matrix given row by row.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n1 = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n1) {
            return Err(Error::Input("ragged cost matrix".into()));
        }
        Self::new(rows.len(), n1, 1, rows.concat())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n0, self.n1, self.routes)
    }

    pub fn index(&self, i: usize, j: usize, r: usize) -> usize {
        (i * self.n1 + j) * self.routes + r
    }

    pub fn get(&self, i: usize, j: usize, r: usize) -> f64 {
        self.values[self.index(i, j, r)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    n0: usize,
    n1: usize,
    routes: usize,
    lambda: Vec<f64>,
    costs: Vec<f64>,
    alpha0: Vec<f64>,
    alpha1: Vec<f64>,
    objective: f64,
}

/// One nonzero plan entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanEntry {
    pub i: usize,
    pub j: usize,
    pub route: usize,
    pub weight: f64,
    pub cost: f64,
}

impl TransportPlan {
    /// Wraps a given coupling after checking it against the marginals.
    pub fn from_lambda(costs: &CostTensor, alpha0: &[f64], alpha1: &[f64], lambda: Vec<f64>) -> Result<Self> {
        let (n0, n1, routes) = costs.shape();
        let alpha0 = normalized_weights(alpha0, n0, "initial weights")?;
        let alpha1 = normalized_weights(alpha1, n1, "terminal weights")?;
        if lambda.len() != costs.values.len() {
            return Err(Error::dim("transport plan", costs.values.len(), lambda.len()));
        }
        if lambda.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Input("transport plan has negative entries".into()));
        }
        let objective = lambda.iter().zip(&costs.values).map(|(l, c)| l * c).sum();
        let plan = Self {
            n0,
            n1,
            routes,
            lambda,
            costs: costs.values.clone(),
            alpha0,
            alpha1,
            objective,
        };
        let (rows, cols) = plan.marginals();
        let off = rows
            .iter()
            .zip(&plan.alpha0)
            .chain(cols.iter().zip(&plan.alpha1))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if off > 1e-8 {
            return Err(Error::Input(format!("transport plan misses its marginals by {off:e}")));
        }
        Ok(plan)
    }

    /// The product coupling α₀ ⊗ α₁ spread evenly over routes.
    pub fn independent(costs: &CostTensor, alpha0: &[f64], alpha1: &[f64]) -> Result<Self> {
        let (n0, n1, routes) = costs.shape();
        let a0 = normalized_weights(alpha0, n0, "initial weights")?;
        let a1 = normalized_weights(alpha1, n1, "terminal weights")?;
        let mut lambda = vec![0.0; n0 * n1 * routes];
        for i in 0..n0 {
            for j in 0..n1 {
                for r in 0..routes {
                    lambda[costs.index(i, j, r)] = a0[i] * a1[j] / routes as f64;
                }
            }
        }
        Self::from_lambda(costs, &a0, &a1, lambda)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n0, self.n1, self.routes)
    }

    pub fn weight(&self, i: usize, j: usize, r: usize) -> f64 {
        self.lambda[(i * self.n1 + j) * self.routes + r]
    }

    pub fn cost(&self, i: usize, j: usize, r: usize) -> f64 {
        self.costs[(i * self.n1 + j) * self.routes + r]
    }

    pub fn weights(&self) -> &[f64] {
        &self.lambda
    }

    pub fn alpha0(&self) -> &[f64] {
        &self.alpha0
    }

    pub fn alpha1(&self) -> &[f64] {
        &self.alpha1
    }

    /// Σ λ J, the transport upper bound.
    pub fn objective(&self) -> f64 {
        self.objective
    }

    /// Every entry in index order, zero ones included.
    pub fn entries(&self) -> impl Iterator<Item = PlanEntry> + '_ {
        let (n1, routes) = (self.n1, self.routes);
        self.lambda.iter().zip(&self.costs).enumerate().map(move |(a, (l, c))| PlanEntry {
            i: a / (n1 * routes),
            j: (a / routes) % n1,
            route: a % routes,
            weight: *l,
            cost: *c,
        })
    }

    /// Entries carrying positive mass.
    pub fn active(&self) -> impl Iterator<Item = PlanEntry> + '_ {
        self.entries().filter(|e| e.weight > 0.0)
    }

    /// Row and column sums, summed over routes.
    pub fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let mut rows = vec![0.0; self.n0];
        let mut cols = vec![0.0; self.n1];
        for e in self.entries() {
            rows[e.i] += e.weight;
            cols[e.j] += e.weight;
        }
        (rows, cols)
    }

    /// Writes `i,j,route,lambda,cost` rows for every entry.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "i,j,route,lambda,cost")?;
        for e in self.entries() {
            writeln!(w, "{},{},{},{:.17e},{:.17e}", e.i, e.j, e.route, e.weight, e.cost)?;
        }
        Ok(())
    }
}

fn normalized_weights(w: &[f64], expected: usize, what: &str) -> Result<Vec<f64>> {
    if w.len() != expected {
        return Err(Error::dim(what, expected, w.len()));
    }
    if let Some(bad) = w.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::Input(format!("{what} contain invalid entry {bad}")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::Input(format!("{what} sum to {sum}, not 1")));
    }
    Ok(w.iter().map(|x| x / sum).collect())
}

/// Spanning-tree basis of the transportation graph with rows as nodes `0..n0` and
/// columns as nodes `n0..n0+n1`.
struct Basis {
    n0: usize,
    n1: usize,
    routes: usize,
    /// Basic arc indices.
    arcs: Vec<usize>,
    flow: Vec<f64>,
}

impl Basis {
    fn ends(&self, arc: usize) -> (usize, usize) {
        let cell = arc / self.routes;
        (cell / self.n1, self.n0 + cell % self.n1)
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n0 + self.n1];
        for &arc in &self.arcs {
            let (r, c) = self.ends(arc);
            adj[r].push((c, arc));
            adj[c].push((r, arc));
        }
        adj
    }

    /// Tree path from `from` to `to` as a list of arcs.
    fn path(&self, adj: &[Vec<(usize, usize)>], from: usize, to: usize) -> Vec<usize> {
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; adj.len()];
        let mut seen = vec![false; adj.len()];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(node) = queue.pop_front() {
            if node == to {
                break;
            }
            for &(next, arc) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, arc));
                    queue.push_back(next);
                }
            }
        }
        let mut arcs = Vec::new();
        let mut node = to;
        while node != from {
            let (prev, arc) = parent[node].expect("basis is a spanning tree");
            arcs.push(arc);
            node = prev;
        }
        arcs.reverse();
        arcs
    }

    /// Dual potentials with the first row pinned to zero.
    fn potentials(&self, adj: &[Vec<(usize, usize)>], costs: &[f64]) -> Vec<f64> {
        let mut pot = vec![f64::NAN; adj.len()];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &(next, arc) in &adj[node] {
                if pot[next].is_nan() {
                    // u_row + v_col = c_arc
                    pot[next] = costs[arc] - pot[node];
                    queue.push_back(next);
                }
            }
        }
        pot
    }
}

/// Minimizes Σ λ J subject to the marginal constraints.
///
/// Ties are broken deterministically: among improving arcs the lowest index enters, and
/// among blocking arcs the lowest index leaves.
pub fn solve_plan(costs: &CostTensor, alpha0: &[f64], alpha1: &[f64]) -> Result<TransportPlan> {
    let (n0, n1, routes) = costs.shape();
    let a0 = normalized_weights(alpha0, n0, "initial weights")?;
    let a1 = normalized_weights(alpha1, n1, "terminal weights")?;
    let c = costs.values();
    let cheapest = |i: usize, j: usize| {
        (0..routes)
            .min_by(|&r, &s| c[costs.index(i, j, r)].total_cmp(&c[costs.index(i, j, s)]).then(r.cmp(&s)))
            .expect("at least one route")
    };

    // Northwest-corner start, keeping degenerate cells so the basis stays a tree.
    let mut basis = Basis {
        n0,
        n1,
        routes,
        arcs: Vec::with_capacity(n0 + n1 - 1),
        flow: vec![0.0; c.len()],
    };
    let (mut supply, mut demand) = (a0.clone(), a1.clone());
    let (mut i, mut j) = (0, 0);
    loop {
        let arc = costs.index(i, j, cheapest(i, j));
        let q = supply[i].min(demand[j]);
        basis.flow[arc] = q;
        basis.arcs.push(arc);
        supply[i] -= q;
        demand[j] -= q;
        if i == n0 - 1 && j == n1 - 1 {
            break;
        }
        if i == n0 - 1 || (j < n1 - 1 && supply[i] > demand[j]) {
            j += 1;
        } else {
            i += 1;
        }
    }
    debug_assert_eq!(basis.arcs.len(), n0 + n1 - 1);

    let scale = c.iter().fold(1.0, |m: f64, v| m.max(v.abs()));
    let eps = 1e-12 * scale;
    let max_pivots = 50 * c.len().max(16) * (n0 + n1);
    let mut in_basis = vec![false; c.len()];
    for &arc in &basis.arcs {
        in_basis[arc] = true;
    }
    let mut pivots = 0;
    loop {
        let adj = basis.adjacency();
        let pot = basis.potentials(&adj, c);
        let entering = (0..c.len()).find(|&arc| {
            if in_basis[arc] {
                return false;
            }
            let (r, col) = basis.ends(arc);
            c[arc] - pot[r] - pot[col] < -eps
        });
        let Some(entering) = entering else { break };
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::Numerical("transport simplex failed to terminate".into()));
        }
        let (row, col) = basis.ends(entering);
        // Cycle: entering arc (+), then the tree path from its column back to its row
        // with alternating signs starting at (−).
        let path = basis.path(&adj, col, row);
        let minus: Vec<usize> = path.iter().copied().step_by(2).collect();
        let plus: Vec<usize> = path.iter().copied().skip(1).step_by(2).collect();
        let theta = minus.iter().map(|&a| basis.flow[a]).fold(f64::INFINITY, f64::min);
        let leaving = *minus
            .iter()
            .filter(|&&a| basis.flow[a] <= theta)
            .min()
            .expect("cycle has a backward arc");
        basis.flow[entering] += theta;
        for &a in &plus {
            basis.flow[a] += theta;
        }
        for &a in &minus {
            basis.flow[a] -= theta;
        }
        basis.flow[leaving] = 0.0;
        in_basis[leaving] = false;
        in_basis[entering] = true;
        let slot = basis.arcs.iter().position(|&a| a == leaving).expect("leaving arc is basic");
        basis.arcs[slot] = entering;
    }
    log::debug!("transport simplex finished after {pivots} pivots");
    let lambda = basis.flow.iter().map(|f| f.max(0.0)).collect();
    TransportPlan::from_lambda(costs, &a0, &a1, lambda)
}
