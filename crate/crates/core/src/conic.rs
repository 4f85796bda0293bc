//! Conic program representation and the interior-point backend.
//!
//! A program maximizes `c^T x + c0` over free variables `x` subject to
//! constraints `f(x) = f0 + F x ∈ K`. Dual values `y` are reported in the
//! same coordinates as `f`, with the Lagrangian
//! `L(x, y) = c^T x + c0 + Σ y^T f(x)` and `y ∈ K*`. Weak duality then reads
//! `c0 + Σ y^T f0 >= c^T x + c0` whenever `c + F^T y = 0`.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolution, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

pub const DEFAULT_TOL: f64 = 5e-8;

/// Affine scalar expression `constant + Σ coef * x[var]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Affine {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn constant(c: f64) -> Self {
        Affine {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: usize) -> Self {
        Affine {
            terms: vec![(v, 1.0)],
            constant: 0.0,
        }
    }

    pub fn term(mut self, v: usize, coef: f64) -> Self {
        if coef != 0.0 {
            self.terms.push((v, coef));
        }
        self
    }

    pub fn plus(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn add_term(&mut self, v: usize, coef: f64) {
        if coef != 0.0 {
            self.terms.push((v, coef));
        }
    }

    pub fn scaled(mut self, a: f64) -> Self {
        for t in &mut self.terms {
            t.1 *= a;
        }
        self.constant *= a;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(v, c)| c * x[*v]).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ConeKind {
    /// Every row equals zero.
    Zero,
    /// Every row is nonnegative.
    Nonneg,
    /// Rows `(a, b, z...)` with `a, b >= 0` and `a b >= |z|^2`.
    RotatedSoc,
    /// Rows are the upper triangle of a symmetric matrix of the given
    /// order, listed column by column: `(0,0), (0,1), (1,1), (0,2), ...`.
    Psd(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Constraint {
    pub name: String,
    pub cone: ConeKind,
    pub rows: Vec<Affine>,
}

/// Named range of variables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConicProgram {
    pub blocks: Vec<VarBlock>,
    pub n_vars: usize,
    /// Maximized objective.
    pub objective: Affine,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Residuals {
    pub r_primal: f64,
    pub r_dual: f64,
    pub r_gap: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.r_primal.max(self.r_dual).max(self.r_gap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConicSolution {
    pub status: Status,
    pub x: Vec<f64>,
    /// One dual vector per constraint, in the coordinates of its rows.
    pub duals: Vec<Vec<f64>>,
    pub objective: f64,
    pub dual_objective: f64,
    pub residuals: Residuals,
    pub iterations: u32,
}

pub fn psd_len(order: usize) -> usize {
    order * (order + 1) / 2
}

/// Position of entry `(i, j)`, `i <= j`, in the column-wise upper triangle.
pub fn psd_index(i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    j * (j + 1) / 2 + i
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares `len` fresh free variables and returns the first index.
    pub fn add_vars(&mut self, name: impl Into<String>, len: usize) -> usize {
        let start = self.n_vars;
        self.blocks.push(VarBlock {
            name: name.into(),
            start,
            len,
        });
        self.n_vars += len;
        start
    }

    /// Declares nonnegative variables.
    pub fn add_nonneg_vars(&mut self, name: impl Into<String>, len: usize) -> usize {
        let name = name.into();
        let start = self.add_vars(name.clone(), len);
        self.add_constraint(format!("{name} >= 0"), ConeKind::Nonneg, (start..start + len).map(Affine::var).collect());
        start
    }

    /// Adds a constraint and returns its index.
    pub fn add_constraint(&mut self, name: impl Into<String>, cone: ConeKind, rows: Vec<Affine>) -> usize {
        self.constraints.push(Constraint {
            name: name.into(),
            cone,
            rows,
        });
        self.constraints.len() - 1
    }

    pub fn n_rows(&self) -> usize {
        self.constraints.iter().map(|c| c.rows.len()).sum()
    }

    /// Structural checks: variable indices in range and cone sizes consistent.
    pub fn check(&self) -> Result<(), String> {
        for (i, c) in self.constraints.iter().enumerate() {
            let ok = match c.cone {
                ConeKind::Zero | ConeKind::Nonneg => true,
                ConeKind::RotatedSoc => c.rows.len() >= 2,
                ConeKind::Psd(n) => c.rows.len() == psd_len(n) && n > 0,
            };
            if !ok {
                return Err(format!("constraint {i} ({}) has inconsistent cone size", c.name));
            }
            if c.rows.iter().flat_map(|r| &r.terms).any(|(v, _)| *v >= self.n_vars) {
                return Err(format!("constraint {i} ({}) references an undeclared variable", c.name));
            }
        }
        if self.objective.terms.iter().any(|(v, _)| *v >= self.n_vars) {
            return Err("objective references an undeclared variable".into());
        }
        Ok(())
    }

    /// Plain-text dump for debugging with external tools.
    pub fn dump(&self) -> String {
        let mut s = format!("vars {}\n", self.n_vars);
        for b in &self.blocks {
            s.push_str(&format!("block {} {} {}\n", b.name, b.start, b.len));
        }
        s.push_str(&format!("max {}\n", fmt_affine(&self.objective)));
        for c in &self.constraints {
            s.push_str(&format!("con {} {:?}\n", c.name, c.cone));
            for r in &c.rows {
                s.push_str(&format!("  {}\n", fmt_affine(r)));
            }
        }
        s
    }
}

fn fmt_affine(a: &Affine) -> String {
    let mut s = format!("{}", a.constant);
    for (v, c) in &a.terms {
        s.push_str(&format!(" {c:+}*x{v}"));
    }
    s
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Maps a dual vector from the backend cone to the row coordinates.
fn dual_to_rows(cone: ConeKind, z: &[f64]) -> Vec<f64> {
    match cone {
        ConeKind::Zero | ConeKind::Nonneg => z.to_vec(),
        ConeKind::RotatedSoc => {
            // rows (a, b, z) enter the SOC as (a + b, a - b, 2 z)
            let mut y = Vec::with_capacity(z.len());
            y.push(z[0] + z[1]);
            y.push(z[0] - z[1]);
            y.extend(z[2..].iter().map(|v| 2.0 * v));
            y
        }
        ConeKind::Psd(n) => {
            let mut y = z.to_vec();
            for j in 0..n {
                for i in 0..j {
                    y[psd_index(i, j)] *= SQRT2;
                }
            }
            y
        }
    }
}

/// Solves the program with the interior-point backend.
///
/// `tol` is used for the backend's feasibility and gap tolerances. Residuals
/// in the returned solution are recomputed by [`kkt_residuals`].
pub fn solve(prog: &ConicProgram, tol: f64) -> ConicSolution {
    if let Err(e) = prog.check() {
        log::error!("malformed conic program: {e}");
        return failed(prog, Status::NumericalFailure);
    }
    let n = prog.n_vars;
    // group constraints by cone type so that the backend sees one cone per group
    let mut order: Vec<usize> = (0..prog.constraints.len()).collect();
    let rank = |c: &Constraint| match c.cone {
        ConeKind::Zero => 0,
        ConeKind::Nonneg => 1,
        ConeKind::RotatedSoc => 2,
        ConeKind::Psd(_) => 3,
    };
    order.sort_by_key(|&i| rank(&prog.constraints[i]));

    let (mut ii, mut jj, mut vv) = (Vec::new(), Vec::new(), Vec::new());
    let mut b = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    let mut offsets = vec![0; prog.constraints.len()];
    let mut push_row = |b: &mut Vec<f64>, row: &Affine, scale: f64| {
        let r = b.len();
        for &(v, c) in &row.terms {
            ii.push(r);
            jj.push(v);
            vv.push(-c * scale);
        }
        b.push(row.constant * scale);
    };
    for &ci in &order {
        let c = &prog.constraints[ci];
        offsets[ci] = b.len();
        match c.cone {
            ConeKind::Zero | ConeKind::Nonneg => {
                for r in &c.rows {
                    push_row(&mut b, r, 1.0);
                }
                if c.rows.is_empty() {
                    continue;
                }
                let cone = if c.cone == ConeKind::Zero {
                    SupportedConeT::ZeroConeT(c.rows.len())
                } else {
                    SupportedConeT::NonnegativeConeT(c.rows.len())
                };
                merge_cone(&mut cones, cone);
            }
            ConeKind::RotatedSoc => {
                let (a, bb) = (&c.rows[0], &c.rows[1]);
                let mut sum = a.clone();
                sum.terms.extend(bb.terms.iter().copied());
                sum.constant += bb.constant;
                let mut diff = a.clone();
                diff.terms.extend(bb.terms.iter().map(|(v, k)| (*v, -k)));
                diff.constant -= bb.constant;
                push_row(&mut b, &sum, 1.0);
                push_row(&mut b, &diff, 1.0);
                for r in &c.rows[2..] {
                    push_row(&mut b, r, 2.0);
                }
                cones.push(SupportedConeT::SecondOrderConeT(c.rows.len()));
            }
            ConeKind::Psd(order_n) => {
                for j in 0..order_n {
                    for i in 0..=j {
                        let s = if i == j { 1.0 } else { SQRT2 };
                        push_row(&mut b, &c.rows[psd_index(i, j)], s);
                    }
                }
                cones.push(SupportedConeT::PSDTriangleConeT(order_n));
            }
        }
    }
    let m = b.len();
    let a = CscMatrix::new_from_triplets(m, n, ii, jj, vv);
    let p = CscMatrix::zeros((n, n));
    let mut q = vec![0.0; n];
    for &(v, c) in &prog.objective.terms {
        q[v] -= c;
    }
    // equilibration and the default LDL backend stall on branch cones with
    // tiny duals (low-resistance transformers); faer on unscaled data does not.
    // Degenerate PSD blocks at rank-one optima occasionally stall the other way
    // round, so a reduced-accuracy first pass gets one retry with the other setup.
    let mut sol = match run_backend(&p, &q, &a, &b, &cones, tol, false) {
        Some(s) => s,
        None => return failed(prog, Status::NumericalFailure),
    };
    if sol.status != SolverStatus::Solved && !is_certificate(sol.status) {
        if let Some(alt) = run_backend(&p, &q, &a, &b, &cones, tol, true) {
            if rank_status(alt.status) < rank_status(sol.status) {
                sol = alt;
            }
        }
    }
    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => Status::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Status::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => Status::Unbounded,
        _ => Status::NumericalFailure,
    };
    if sol.status == SolverStatus::AlmostSolved {
        log::debug!("conic backend returned a reduced-accuracy solution");
    }
    let duals: Vec<Vec<f64>> = prog
        .constraints
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let len = match c.cone {
                ConeKind::Psd(k) => psd_len(k),
                _ => c.rows.len(),
            };
            dual_to_rows(c.cone, &sol.z[offsets[ci]..offsets[ci] + len])
        })
        .collect();
    let mut out = ConicSolution {
        status,
        x: sol.x.clone(),
        duals,
        objective: prog.objective.eval(&sol.x),
        dual_objective: f64::NAN,
        residuals: Residuals::default(),
        iterations: sol.iterations,
    };
    if status == Status::Optimal {
        out.dual_objective = dual_objective(prog, &out.duals);
        out.residuals = kkt_residuals(prog, &out);
    }
    out
}

fn is_certificate(s: SolverStatus) -> bool {
    matches!(s, SolverStatus::PrimalInfeasible | SolverStatus::DualInfeasible)
}

fn rank_status(s: SolverStatus) -> u8 {
    match s {
        SolverStatus::Solved | SolverStatus::PrimalInfeasible | SolverStatus::DualInfeasible => 0,
        SolverStatus::AlmostSolved | SolverStatus::AlmostPrimalInfeasible | SolverStatus::AlmostDualInfeasible => 1,
        _ => 2,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_backend(
    p: &CscMatrix<f64>,
    q: &[f64],
    a: &CscMatrix<f64>,
    b: &[f64],
    cones: &[SupportedConeT<f64>],
    tol: f64,
    fallback: bool,
) -> Option<DefaultSolution<f64>> {
    let mut builder = DefaultSettingsBuilder::default();
    builder
        .verbose(false)
        .tol_feas(tol)
        .tol_gap_abs(tol)
        .tol_gap_rel(tol)
        .tol_ktratio(tol.max(1e-10).sqrt().min(1e-6))
        .max_iter(300)
        .presolve_enable(false)
        .chordal_decomposition_enable(false)
        .max_threads(1);
    if !fallback {
        builder.equilibrate_enable(false).direct_solve_method("faer".into());
    }
    let settings = builder.build().expect("valid solver settings");
    match DefaultSolver::new(p, q, a, b, cones, settings) {
        Ok(mut s) => {
            s.solve();
            Some(s.solution)
        }
        Err(e) => {
            log::error!("conic backend rejected the program: {e:?}");
            None
        }
    }
}

fn merge_cone(cones: &mut Vec<SupportedConeT<f64>>, cone: SupportedConeT<f64>) {
    use SupportedConeT::*;
    match (cones.last_mut(), cone) {
        (Some(ZeroConeT(n)), ZeroConeT(k)) | (Some(NonnegativeConeT(n)), NonnegativeConeT(k)) => *n += k,
        (_, c) => cones.push(c),
    }
}

fn failed(prog: &ConicProgram, status: Status) -> ConicSolution {
    ConicSolution {
        status,
        x: vec![0.0; prog.n_vars],
        duals: prog.constraints.iter().map(|c| vec![0.0; c.rows.len()]).collect(),
        objective: f64::NAN,
        dual_objective: f64::NAN,
        residuals: Residuals::default(),
        iterations: 0,
    }
}

/// `c0 + Σ y^T f0`.
pub fn dual_objective(prog: &ConicProgram, duals: &[Vec<f64>]) -> f64 {
    prog.objective.constant
        + prog
            .constraints
            .iter()
            .zip(duals)
            .map(|(c, y)| c.rows.iter().zip(y).map(|(r, yi)| r.constant * yi).sum::<f64>())
            .sum::<f64>()
}

fn sym_from_rows(n: usize, v: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            m[(i, j)] = v[psd_index(i, j)];
            m[(j, i)] = v[psd_index(i, j)];
        }
    }
    m
}

/// Distance-like violation of cone membership for a vector in row coordinates.
/// With `dual` set, the vector is checked against the dual cone under the
/// row pairing.
fn cone_violation(cone: ConeKind, f: &[f64], dual: bool) -> f64 {
    match cone {
        ConeKind::Zero => {
            if dual {
                0.0
            } else {
                f.iter().fold(0.0, |m, v| m.max(v.abs()))
            }
        }
        ConeKind::Nonneg => f.iter().fold(0.0, |m, v| m.max(-v)),
        ConeKind::RotatedSoc => {
            // the dual of {a b >= |z|^2} under this pairing is {4 a b >= |z|^2}
            let zs: f64 = f[2..].iter().map(|v| v * v).sum::<f64>();
            let zs = if dual { zs / 4.0 } else { zs };
            let (a, b) = (f[0], f[1]);
            // distance to the cone in the equivalent SOC coordinates
            let t = a + b;
            let r = ((a - b).powi(2) + 4.0 * zs).sqrt();
            ((r - t) / 2.0).max(0.0)
        }
        ConeKind::Psd(n) => {
            let mut v = f.to_vec();
            if dual {
                for j in 0..n {
                    for i in 0..j {
                        v[psd_index(i, j)] /= 2.0;
                    }
                }
            }
            let e = SymmetricEigen::new(sym_from_rows(n, &v)).eigenvalues;
            (-e.min()).max(0.0)
        }
    }
}

/// Recomputes primal, dual and gap residuals from the raw program data.
///
/// * `r_primal`: largest cone violation of `f(x)`, over `1 + max |f0|`.
/// * `r_dual`: `||c + F^T y||_inf / (1 + ||c||_inf)` plus the largest dual-cone violation of `y`.
/// * `r_gap`: `|primal - dual| / (1 + |primal|)`.
pub fn kkt_residuals(prog: &ConicProgram, sol: &ConicSolution) -> Residuals {
    let x = &sol.x;
    let mut f0_scale: f64 = 0.0;
    let mut r_primal: f64 = 0.0;
    let mut r_cone_dual: f64 = 0.0;
    let mut grad = vec![0.0; prog.n_vars];
    for &(v, c) in &prog.objective.terms {
        grad[v] += c;
    }
    for (c, y) in prog.constraints.iter().zip(&sol.duals) {
        let f: Vec<f64> = c.rows.iter().map(|r| r.eval(x)).collect();
        for r in &c.rows {
            f0_scale = f0_scale.max(r.constant.abs());
        }
        r_primal = r_primal.max(cone_violation(c.cone, &f, false));
        r_cone_dual = r_cone_dual.max(cone_violation(c.cone, y, true));
        for (r, yi) in c.rows.iter().zip(y) {
            for &(v, k) in &r.terms {
                grad[v] += k * yi;
            }
        }
    }
    let c_inf = prog.objective.terms.iter().fold(0.0f64, |m, (_, c)| m.max(c.abs()));
    let stat = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let primal = prog.objective.eval(x);
    let dual = dual_objective(prog, &sol.duals);
    Residuals {
        r_primal: r_primal / (1.0 + f0_scale),
        r_dual: stat / (1.0 + c_inf) + r_cone_dual / (1.0 + c_inf),
        r_gap: (primal - dual).abs() / (1.0 + primal.abs()),
    }
}

/// Whether a 2×2 Hermitian matrix `[[a, c], [conj(c), b]]` is psd, decided
/// by rotated-cone membership.
pub fn hermitian2_in_cone(a: f64, b: f64, c: num_complex::Complex64, tol: f64) -> bool {
    cone_violation(ConeKind::RotatedSoc, &[a, b, c.re, c.im], false) <= tol
}
