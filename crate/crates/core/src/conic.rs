//! Standard-form conic programs: linear objective, affine equalities, nonnegative scalar
//! expressions and PSD matrix expressions over named variable blocks.
//!
//! Symmetric-matrix blocks are stored as scaled lower-triangular vectors (off-diagonals
//! multiplied by √2) so that inner products of stored vectors equal Frobenius inner
//! products. The interior-point backend is Clarabel.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::sync::Arc;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, Mat, Vector};

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Affine scalar expression `Σ cᵢ xᵢ + c₀` over program variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(index: usize, coef: f64) -> Self {
        Self {
            terms: vec![(index, coef)],
            constant: 0.0,
        }
    }

    pub fn add_scaled(&mut self, other: &AffExpr, scale: f64) {
        if scale == 0.0 {
            return;
        }
        self.terms
            .extend(other.terms.iter().map(|(i, c)| (*i, c * scale)));
        self.constant += other.constant * scale;
    }

    pub fn scaled(&self, scale: f64) -> AffExpr {
        let mut out = AffExpr::zero();
        out.add_scaled(self, scale);
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(i, c)| c * x[*i]).sum::<f64>()
    }

    /// Terms with duplicate variables merged and zeros dropped, sorted by variable.
    pub fn compact(&self) -> Vec<(usize, f64)> {
        let mut terms = self.terms.clone();
        terms.sort_by_key(|(i, _)| *i);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
        for (i, c) in terms {
            match out.last_mut() {
                Some((j, acc)) if *j == i => *acc += c,
                _ => out.push((i, c)),
            }
        }
        out.retain(|(_, c)| *c != 0.0);
        out
    }
}

impl Add for AffExpr {
    type Output = AffExpr;
    fn add(mut self, rhs: AffExpr) -> AffExpr {
        self += rhs;
        self
    }
}

impl AddAssign for AffExpr {
    fn add_assign(&mut self, rhs: AffExpr) {
        self.terms.extend(rhs.terms);
        self.constant += rhs.constant;
    }
}

impl Sub for AffExpr {
    type Output = AffExpr;
    fn sub(mut self, rhs: AffExpr) -> AffExpr {
        self -= rhs;
        self
    }
}

impl SubAssign for AffExpr {
    fn sub_assign(&mut self, rhs: AffExpr) {
        self.add_scaled(&rhs, -1.0);
    }
}

impl Mul<f64> for AffExpr {
    type Output = AffExpr;
    fn mul(self, rhs: f64) -> AffExpr {
        self.scaled(rhs)
    }
}

impl Neg for AffExpr {
    type Output = AffExpr;
    fn neg(self) -> AffExpr {
        self.scaled(-1.0)
    }
}

/// Symmetric matrix whose lower-triangle entries (row-major) are affine expressions.
#[derive(Debug, Clone)]
pub struct SymExpr {
    dim: usize,
    entries: Vec<AffExpr>,
}

impl SymExpr {
    pub fn from_fn<F>(dim: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> AffExpr,
    {
        let mut entries = Vec::with_capacity(dim * (dim + 1) / 2);
        for i in 0..dim {
            for j in 0..=i {
                entries.push(f(i, j));
            }
        }
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize, j: usize) -> &AffExpr {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        &self.entries[r * (r + 1) / 2 + c]
    }

    pub fn eval(&self, x: &[f64]) -> Mat {
        Mat::from_fn(self.dim, self.dim, |i, j| self.entry(i, j).eval(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockShape {
    Scalar,
    Vector(usize),
    Matrix { rows: usize, cols: usize },
    Symmetric(usize),
}

impl BlockShape {
    fn len(&self) -> usize {
        match *self {
            BlockShape::Scalar => 1,
            BlockShape::Vector(n) => n,
            BlockShape::Matrix { rows, cols } => rows * cols,
            BlockShape::Symmetric(n) => n * (n + 1) / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId(usize);

#[derive(Debug, Clone)]
struct Block {
    name: String,
    shape: BlockShape,
    offset: usize,
}

#[derive(Debug, Clone, Default)]
struct Layout {
    blocks: Vec<Block>,
    by_name: HashMap<String, usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    layout: Layout,
    n_vars: usize,
    objective: AffExpr,
    equalities: Vec<AffExpr>,
    nonneg: Vec<AffExpr>,
    psd: Vec<SymExpr>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, name: impl Into<String>, shape: BlockShape) -> Result<BlockId> {
        let name = name.into();
        if self.layout.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate block name `{name}`")));
        }
        let id = self.layout.blocks.len();
        self.layout.blocks.push(Block {
            name: name.clone(),
            shape,
            offset: self.n_vars,
        });
        self.layout.by_name.insert(name, id);
        self.n_vars += shape.len();
        Ok(BlockId(id))
    }

    pub fn block(&self, name: &str) -> Option<BlockId> {
        self.layout.by_name.get(name).map(|i| BlockId(*i))
    }

    pub fn shape(&self, id: BlockId) -> BlockShape {
        self.layout.blocks[id.0].shape
    }

    pub fn variable_count(&self) -> usize {
        self.n_vars
    }

    pub fn block_count(&self) -> usize {
        self.layout.blocks.len()
    }

    pub fn equality_count(&self) -> usize {
        self.equalities.len()
    }

    pub fn nonneg_count(&self) -> usize {
        self.nonneg.len()
    }

    pub fn psd_count(&self) -> usize {
        self.psd.len()
    }

    pub fn nonneg_rows(&self) -> &[AffExpr] {
        &self.nonneg
    }

    pub fn scalar(&self, id: BlockId) -> AffExpr {
        let b = &self.layout.blocks[id.0];
        debug_assert_eq!(b.shape, BlockShape::Scalar);
        AffExpr::var(b.offset, 1.0)
    }

    pub fn elem(&self, id: BlockId, i: usize) -> AffExpr {
        let b = &self.layout.blocks[id.0];
        match b.shape {
            BlockShape::Vector(n) => {
                assert!(i < n, "index {i} outside vector block `{}`", b.name);
                AffExpr::var(b.offset + i, 1.0)
            }
            BlockShape::Scalar => AffExpr::var(b.offset, 1.0),
            _ => panic!("block `{}` is not a vector", b.name),
        }
    }

    /// Entry `(i, j)` of a matrix or symmetric block.
    pub fn entry(&self, id: BlockId, i: usize, j: usize) -> AffExpr {
        let b = &self.layout.blocks[id.0];
        match b.shape {
            BlockShape::Matrix { rows, cols } => {
                assert!(i < rows && j < cols);
                AffExpr::var(b.offset + i * cols + j, 1.0)
            }
            BlockShape::Symmetric(n) => {
                assert!(i < n && j < n);
                let (r, c) = if i >= j { (i, j) } else { (j, i) };
                let coef = if r == c { 1.0 } else { 1.0 / SQRT2 };
                AffExpr::var(b.offset + r * (r + 1) / 2 + c, coef)
            }
            _ => panic!("block `{}` is not a matrix", b.name),
        }
    }

    /// Adds `expr = 0`.
    pub fn add_equality(&mut self, expr: AffExpr) {
        self.equalities.push(expr);
    }

    /// Adds `expr ≥ 0`.
    pub fn add_nonneg(&mut self, expr: AffExpr) {
        self.nonneg.push(expr);
    }

    /// Adds `expr ⪰ 0`.
    pub fn add_psd(&mut self, expr: SymExpr) {
        self.psd.push(expr);
    }

    pub fn add_objective(&mut self, expr: &AffExpr, scale: f64) {
        self.objective.add_scaled(expr, scale);
    }

    fn check(&self) -> Result<()> {
        let n = self.n_vars;
        let bad = |e: &AffExpr| e.terms.iter().any(|(i, c)| *i >= n || !c.is_finite()) || !e.constant.is_finite();
        if bad(&self.objective) {
            return Err(Error::Config("objective references an undeclared variable".into()));
        }
        if self.equalities.iter().chain(&self.nonneg).any(bad)
            || self.psd.iter().any(|p| p.entries.iter().any(bad))
        {
            return Err(Error::Config("constraint references an undeclared variable".into()));
        }
        Ok(())
    }

    /// Assembles `s = b − A x` rows in cone order: zero, nonnegative, PSD (svec).
    fn assemble(&self) -> (Vec<(usize, usize, f64)>, Vec<f64>, Vec<SupportedConeT<f64>>) {
        let mut triplets = Vec::new();
        let mut rhs = Vec::new();
        let mut cones = Vec::new();
        let mut row = 0usize;
        let mut push_row = |expr: &AffExpr, scale: f64, triplets: &mut Vec<(usize, usize, f64)>, rhs: &mut Vec<f64>| {
            for (i, c) in expr.compact() {
                triplets.push((row, i, -c * scale));
            }
            rhs.push(expr.constant * scale);
            row += 1;
        };
        for e in &self.equalities {
            push_row(e, 1.0, &mut triplets, &mut rhs);
        }
        if !self.equalities.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(self.equalities.len()));
        }
        for e in &self.nonneg {
            push_row(e, 1.0, &mut triplets, &mut rhs);
        }
        if !self.nonneg.is_empty() {
            cones.push(SupportedConeT::NonnegativeConeT(self.nonneg.len()));
        }
        for p in &self.psd {
            // Upper triangle, column-major, off-diagonals scaled by √2.
            for j in 0..p.dim {
                for i in 0..=j {
                    let scale = if i == j { 1.0 } else { SQRT2 };
                    push_row(p.entry(i, j), scale, &mut triplets, &mut rhs);
                }
            }
            cones.push(SupportedConeT::PSDTriangleConeT(p.dim));
        }
        (triplets, rhs, cones)
    }

    /// Writes the constraint matrix as `row col coefficient` lines.
    ///
    /// Rows follow cone order (equalities, nonnegative rows, PSD rows in scaled
    /// upper-triangular column-major order) and encode `b − A x`; the right-hand side
    /// `b` appears with column `rhs`, and objective coefficients with row `obj`.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let (triplets, rhs, _) = self.assemble();
        writeln!(w, "# rows {} cols {}", rhs.len(), self.n_vars)?;
        for (i, c) in self.objective.compact() {
            writeln!(w, "obj {i} {c:.17e}")?;
        }
        let mut sorted = triplets;
        sorted.sort_by_key(|(r, c, _)| (*r, *c));
        for (r, c, v) in sorted {
            writeln!(w, "{r} {c} {v:.17e}")?;
        }
        for (r, b) in rhs.iter().enumerate() {
            if *b != 0.0 {
                writeln!(w, "{r} rhs {b:.17e}")?;
            }
        }
        Ok(())
    }

    fn residuals(&self, x: &[f64]) -> f64 {
        let eq = self.equalities.iter().map(|e| e.eval(x).abs());
        let nn = self.nonneg.iter().map(|e| (-e.eval(x)).max(0.0));
        let psd = self.psd.iter().map(|p| (-min_eigenvalue(&p.eval(x))).max(0.0));
        eq.chain(nn).chain(psd).fold(0.0, f64::max)
    }

    pub fn solve(&self, tol: &Tolerances) -> Result<ConicSolution> {
        self.check()?;
        let n = self.n_vars;
        let layout = Arc::new(self.layout.clone());

        // Constant rows are decided here; the backend never sees them.
        let trivially_violated = self
            .equalities
            .iter()
            .any(|e| e.compact().is_empty() && e.constant.abs() > tol.primal)
            || self
                .nonneg
                .iter()
                .any(|e| e.compact().is_empty() && e.constant < -tol.primal);
        if trivially_violated {
            return Ok(ConicSolution {
                status: SolveStatus::Infeasible,
                objective_value: f64::NAN,
                x: vec![0.0; n],
                residuals: Residuals {
                    primal: f64::INFINITY,
                    dual: f64::NAN,
                    gap: f64::NAN,
                },
                iterations: 0,
                layout,
            });
        }
        let mut reduced = self.clone();
        reduced
            .equalities
            .retain(|e| !e.compact().is_empty());
        reduced.nonneg.retain(|e| !e.compact().is_empty());

        let (triplets, rhs, cones) = reduced.assemble();
        let a = csc_from_triplets(rhs.len(), n, triplets);
        let p = CscMatrix::zeros((n, n));
        let mut q = vec![0.0; n];
        for (i, c) in self.objective.compact() {
            q[i] = c;
        }
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(tol.max_iterations)
            .tol_feas(tol.primal.min(tol.dual))
            .tol_gap_abs(tol.gap)
            .tol_gap_rel(tol.gap)
            .max_threads(1)
            .build()
            .map_err(|e| Error::Config(format!("solver settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &q, &a, &rhs, &cones, settings)
            .map_err(|e| Error::Config(format!("solver rejected program: {e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let info = &solver.info;
        let x = sol.x.clone();
        let primal = self.residuals(&x);
        let residuals = Residuals {
            primal,
            dual: info.res_dual,
            gap: info.gap_rel,
        };
        let within = |factor: f64| {
            primal <= factor * tol.primal.max(1e-12) * (1.0 + rhs_scale(&rhs))
                && info.gap_rel <= factor * tol.gap
        };
        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved if within(10.0) => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                SolveStatus::Unbounded
            }
            _ => SolveStatus::MaxIterations,
        };
        log::debug!(
            "conic solve: {} vars, {} rows, status {:?} -> {status}, {} iterations, primal residual {primal:.2e}",
            n,
            rhs.len(),
            sol.status,
            sol.iterations
        );
        Ok(ConicSolution {
            status,
            objective_value: self.objective.eval(&x),
            x,
            residuals,
            iterations: sol.iterations,
            layout,
        })
    }
}

fn rhs_scale(rhs: &[f64]) -> f64 {
    rhs.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

fn csc_from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> CscMatrix<f64> {
    triplets.sort_by_key(|(r, c, _)| (*c, *r));
    let mut colptr = vec![0usize; cols + 1];
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(triplets.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in triplets {
        if last == Some((r, c)) {
            *nzval.last_mut().expect("previous entry") += v;
            continue;
        }
        colptr[c + 1] += 1;
        rowval.push(r);
        nzval.push(v);
        last = Some((r, c));
    }
    for c in 0..cols {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(rows, cols, colptr, rowval, nzval)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub max_iterations: u32,
}

impl Tolerances {
    pub fn uniform(tol: f64) -> Self {
        Self {
            primal: tol,
            dual: tol,
            gap: tol,
            ..Self::default()
        }
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            primal: 1e-8,
            dual: 1e-8,
            gap: 1e-8,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::MaxIterations => "max_iterations",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// Largest absolute violation of any equality, nonnegativity or PSD membership.
    pub primal: f64,
    pub dual: f64,
    /// Relative duality gap.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockValue {
    Scalar(f64),
    Vector(Vector),
    Matrix(Mat),
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub objective_value: f64,
    pub x: Vec<f64>,
    pub residuals: Residuals,
    pub iterations: u32,
    layout: Arc<Layout>,
}

impl ConicSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Errors unless the status carries a usable iterate.
    pub fn require_usable(&self, label: &str) -> Result<()> {
        match self.status {
            SolveStatus::Optimal => Ok(()),
            status => Err(Error::Solver {
                label: label.to_string(),
                status: status.to_string(),
            }),
        }
    }

    pub fn extract_block(&self, name: &str) -> Result<BlockValue> {
        let id = *self
            .layout
            .by_name
            .get(name)
            .ok_or_else(|| Error::Lookup(name.to_string()))?;
        Ok(self.value(BlockId(id)))
    }

    pub fn value(&self, id: BlockId) -> BlockValue {
        let b = &self.layout.blocks[id.0];
        let x = &self.x[b.offset..b.offset + b.shape.len()];
        match b.shape {
            BlockShape::Scalar => BlockValue::Scalar(x[0]),
            BlockShape::Vector(n) => BlockValue::Vector(Vector::from_column_slice(&x[..n])),
            BlockShape::Matrix { rows, cols } => BlockValue::Matrix(Mat::from_row_slice(rows, cols, x)),
            BlockShape::Symmetric(n) => {
                let mut m = Mat::zeros(n, n);
                for i in 0..n {
                    for j in 0..=i {
                        let v = x[i * (i + 1) / 2 + j];
                        let v = if i == j { v } else { v / SQRT2 };
                        m[(i, j)] = v;
                        m[(j, i)] = v;
                    }
                }
                BlockValue::Matrix(m)
            }
        }
    }

    pub fn scalar(&self, id: BlockId) -> f64 {
        match self.value(id) {
            BlockValue::Scalar(v) => v,
            BlockValue::Vector(v) => v[0],
            BlockValue::Matrix(m) => m[(0, 0)],
        }
    }

    pub fn vector(&self, id: BlockId) -> Vector {
        match self.value(id) {
            BlockValue::Scalar(v) => Vector::from_element(1, v),
            BlockValue::Vector(v) => v,
            BlockValue::Matrix(m) => Vector::from_column_slice(m.as_slice()),
        }
    }

    pub fn matrix(&self, id: BlockId) -> Mat {
        match self.value(id) {
            BlockValue::Scalar(v) => Mat::from_element(1, 1, v),
            BlockValue::Vector(v) => Mat::from_column_slice(v.len(), 1, v.as_slice()),
            BlockValue::Matrix(m) => m,
        }
    }
}
