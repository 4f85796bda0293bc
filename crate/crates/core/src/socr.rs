//! Second-order cone relaxation of the welfare-maximizing OPF.
//!
//! The Gram matrix `V = v v^H` is only represented on the diagonal and on
//! the AC-branch entries (a partial Hermitian matrix). Every 2×2 principal
//! submatrix on an AC branch is required to be psd, which for 2×2 blocks is
//! a rotated second-order cone.

use num_complex::Complex64;
use serde::Serialize;
use std::collections::HashMap;

use crate::conic::{self, Affine, ConeKind, ConicProgram, ConicSolution, Residuals, Status};
use crate::error::{Error, Result};
use crate::grid::{max_profit, max_surplus, BenefitFn, Capability, CostFn, GenSpec, Grid, LoadRegion, LoadSpec};
use crate::hermitian::SparseHermitian;
use crate::matrices::ConstraintSystem;

/// Residual above which the dual identities indicate an assembly error.
pub const DUAL_IDENTITY_TOL: f64 = 1e-5;

/// Diagonal and AC-branch entries of a Gram matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartialGram {
    pub diag: Vec<f64>,
    /// `W[from(k), to(k)]` per AC branch.
    pub offdiag: Vec<Complex64>,
}

impl PartialGram {
    pub fn from_voltages(grid: &Grid, v: &[Complex64]) -> Self {
        PartialGram {
            diag: v.iter().map(|x| x.norm_sqr()).collect(),
            offdiag: grid.ac_branches.iter().map(|b| v[b.from] * v[b.to].conj()).collect(),
        }
    }

    /// The 2×2 block `[[W_ii, W_ij], [conj(W_ij), W_jj]]` of branch `k`.
    pub fn block(&self, pairs: &[(usize, usize)], k: usize) -> (f64, f64, Complex64) {
        let (i, j) = pairs[k];
        (self.diag[i], self.diag[j], self.offdiag[k])
    }

    /// Entry lookup on the stored pattern; zero elsewhere.
    pub fn lookup(&self, pairs: &[(usize, usize)]) -> impl Fn(usize, usize) -> Complex64 + '_ {
        let map: HashMap<(usize, usize), Complex64> = pairs
            .iter()
            .zip(&self.offdiag)
            .flat_map(|(&(i, j), &w)| [((i, j), w), ((j, i), w.conj())])
            .collect();
        move |i, j| {
            if i == j {
                Complex64::new(self.diag[i], 0.0)
            } else {
                map.get(&(i, j)).copied().unwrap_or_default()
            }
        }
    }
}

/// Variable indices of a Gram representation inside a conic program.
#[derive(Debug, Clone)]
pub struct GramVars {
    pub diag: Vec<usize>,
    /// For `i < j`: `(re, im, sign)` with `W_ij = x[re] + i sign x[im]`.
    pub off: HashMap<(usize, usize), (usize, usize, f64)>,
}

impl GramVars {
    /// `trace(A W)` as an affine expression. Entries of `A` outside the
    /// represented pattern must be zero.
    pub fn trace(&self, a: &SparseHermitian, scale: f64) -> Affine {
        let mut out = Affine::default();
        for ((i, j), v) in a.upper() {
            if i == j {
                out.add_term(self.diag[i], scale * v.re);
            } else {
                let (re, im, sign) = *self
                    .off
                    .get(&(i, j))
                    .unwrap_or_else(|| panic!("entry ({i}, {j}) outside the Gram pattern"));
                out.add_term(re, 2.0 * scale * v.re);
                out.add_term(im, 2.0 * scale * sign * v.im);
            }
        }
        out
    }
}

/// Where the market part of a relaxation lives in its conic program.
#[derive(Debug, Clone)]
pub struct MarketLayout {
    pub dc: usize,
    /// `(P, Q)` variable pair per generator.
    pub gen: Vec<usize>,
    /// Variable pair per load; `None` for fixed loads.
    pub load: Vec<Option<usize>>,
    /// Zero-cone constraint with `N` active then `N` reactive balance rows.
    pub balance: usize,
    /// Nonnegative constraint holding the stacked inequality rows.
    pub ineq: usize,
    /// Positive divisor applied to each stacked row; keeps the 99 p.u.
    /// placeholder ratings from dominating the iterates.
    pub row_scale: Vec<f64>,
    /// Objective divisor applied during assembly.
    pub obj_scale: f64,
}

/// Typical marginal value magnitude, used to normalize the objective.
pub(crate) fn objective_scale(grid: &Grid) -> f64 {
    let mut s: f64 = 0.0;
    for g in &grid.generators {
        let (lo, hi) = g.capability.p_range();
        for p in [lo, hi] {
            let (a, b) = g.cost.derivative_interval(p);
            s = s.max(a.abs()).max(b.abs());
        }
    }
    for l in &grid.loads {
        for seg in l.benefit.segments() {
            s = s.max(seg.slope.abs());
        }
    }
    s.max(1.0)
}

pub(crate) fn bounded_pair(prog: &mut ConicProgram, name: &str, var: usize, lo: f64, hi: f64) {
    if lo == hi {
        prog.add_constraint(format!("{name} fixed"), ConeKind::Zero, vec![Affine::var(var).plus(-lo)]);
    } else {
        prog.add_constraint(
            format!("{name} bounds"),
            ConeKind::Nonneg,
            vec![Affine::var(var).plus(-lo), Affine::constant(hi).term(var, -1.0)],
        );
    }
}

fn add_capability(prog: &mut ConicProgram, g: usize, var: usize, cap: &Capability) {
    match cap {
        Capability::Box {
            p_min,
            p_max,
            q_min,
            q_max,
        } => {
            bounded_pair(prog, &format!("gen {g} P"), var, *p_min, *p_max);
            bounded_pair(prog, &format!("gen {g} Q"), var + 1, *q_min, *q_max);
        }
        Capability::Polygon { .. } => {
            let rows = cap
                .halfplanes()
                .into_iter()
                .map(|(a, b)| Affine::constant(b).term(var, -a[0]).term(var + 1, -a[1]))
                .collect();
            prog.add_constraint(format!("gen {g} capability"), ConeKind::Nonneg, rows);
        }
    }
}

pub(crate) fn add_cost(prog: &mut ConicProgram, g: usize, var: usize, cost: &CostFn) {
    match cost {
        CostFn::Quadratic { c2, c1, c0 } => {
            if *c2 > 0.0 {
                let t = prog.add_vars(format!("gen {g} cost"), 1);
                prog.objective.add_term(t, -1.0);
                prog.add_constraint(
                    format!("gen {g} cost epigraph"),
                    ConeKind::RotatedSoc,
                    vec![
                        Affine::var(t).term(var, -c1).plus(-c0),
                        Affine::constant(1.0),
                        Affine::default().term(var, c2.sqrt()),
                    ],
                );
            } else {
                prog.objective.add_term(var, -c1);
                prog.objective.constant -= c0;
            }
        }
        CostFn::PiecewiseLinear { .. } => {
            let t = prog.add_vars(format!("gen {g} cost"), 1);
            prog.objective.add_term(t, -1.0);
            let rows = cost
                .segments()
                .unwrap_or_default()
                .into_iter()
                .map(|s| Affine::var(t).term(var, -s.slope).plus(-s.offset))
                .collect();
            prog.add_constraint(format!("gen {g} cost epigraph"), ConeKind::Nonneg, rows);
        }
    }
}

pub(crate) fn add_benefit(prog: &mut ConicProgram, l: usize, var: usize, benefit: &BenefitFn) {
    if benefit.is_zero() {
        return;
    }
    let u = prog.add_vars(format!("load {l} benefit"), 1);
    prog.objective.add_term(u, 1.0);
    let rows = benefit
        .segments()
        .into_iter()
        .map(|s| Affine::constant(s.offset).term(var, s.slope).term(u, -1.0))
        .collect();
    prog.add_constraint(format!("load {l} benefit hypograph"), ConeKind::Nonneg, rows);
}

/// Adds DC variables, dispatch, power balance, stacked inequalities and the
/// welfare objective on top of an existing Gram representation.
pub fn assemble_market(prog: &mut ConicProgram, cs: &ConstraintSystem, grid: &Grid, gram: &GramVars) -> MarketLayout {
    let n = grid.n_buses();
    let obj_scale = objective_scale(grid);
    let dc = prog.add_vars("dc", cs.dc.n_vars);

    let mut gen = Vec::with_capacity(grid.generators.len());
    for (g, spec) in grid.generators.iter().enumerate() {
        let var = prog.add_vars(format!("gen {g}"), 2);
        add_capability(prog, g, var, &spec.capability);
        add_cost(prog, g, var, &spec.cost.scaled(1.0 / obj_scale));
        gen.push(var);
    }

    let mut load = Vec::with_capacity(grid.loads.len());
    for (l, spec) in grid.loads.iter().enumerate() {
        match &spec.region {
            LoadRegion::Fixed { p, .. } => {
                prog.objective.constant += spec.benefit.value(*p) / obj_scale;
                load.push(None);
            }
            LoadRegion::Box {
                p_min,
                p_max,
                q_min,
                q_max,
            } => {
                let var = prog.add_vars(format!("load {l}"), 2);
                bounded_pair(prog, &format!("load {l} P"), var, *p_min, *p_max);
                bounded_pair(prog, &format!("load {l} Q"), var + 1, *q_min, *q_max);
                let scaled = match &spec.benefit {
                    BenefitFn::Zero => BenefitFn::Zero,
                    BenefitFn::PiecewiseLinear { points } => BenefitFn::PiecewiseLinear {
                        points: points.iter().map(|p| [p[0], p[1] / obj_scale]).collect(),
                    },
                };
                add_benefit(prog, l, var, &scaled);
                load.push(Some(var));
            }
        }
    }

    // g - d - trace(P_n W) - h_n^T p = 0
    let mut rows = Vec::with_capacity(2 * n);
    for part in 0..2 {
        for bus in 0..n {
            let mats = if part == 0 { &cs.p } else { &cs.q };
            let h = if part == 0 { &cs.dc.h_p } else { &cs.dc.h_q };
            let mut row = gram.trace(&mats[bus], -1.0);
            for &(v, c) in &h[bus] {
                row.add_term(dc + v, -c);
            }
            for (g, spec) in grid.generators.iter().enumerate() {
                if spec.bus == bus {
                    row.add_term(gen[g] + part, 1.0);
                }
            }
            for (l, spec) in grid.loads.iter().enumerate() {
                if spec.bus != bus {
                    continue;
                }
                match (&spec.region, load[l]) {
                    (_, Some(var)) => row.add_term(var + part, -1.0),
                    (LoadRegion::Fixed { p, q }, None) => row.constant -= if part == 0 { *p } else { *q },
                    _ => unreachable!(),
                }
            }
            rows.push(row);
        }
    }
    let balance = prog.add_constraint("power balance", ConeKind::Zero, rows);

    let row_scale: Vec<f64> = cs.rows.iter().map(|r| r.b.abs().max(1.0)).collect();
    let rows = cs
        .rows
        .iter()
        .zip(&row_scale)
        .map(|(r, &k)| {
            let mut a = gram.trace(&r.c, -1.0).plus(r.b);
            for &(v, c) in &r.dc {
                a.add_term(dc + v, -c);
            }
            a.scaled(1.0 / k)
        })
        .collect();
    let ineq = prog.add_constraint("stacked inequalities", ConeKind::Nonneg, rows);

    MarketLayout {
        dc,
        gen,
        load,
        balance,
        ineq,
        row_scale,
        obj_scale,
    }
}

/// Index bookkeeping for a built relaxation.
#[derive(Debug, Clone)]
pub struct SocrLayout {
    pub gram: GramVars,
    pub market: MarketLayout,
    /// Rotated-cone constraint per AC branch.
    pub cones: Vec<usize>,
}

/// Number of real scalars in the partial Gram matrix, `N + 2 E`.
pub fn gram_dimension(grid: &Grid) -> usize {
    grid.n_buses() + 2 * grid.ac_branches.len()
}

pub fn build_socr(cs: &ConstraintSystem, grid: &Grid) -> (ConicProgram, SocrLayout) {
    let n = grid.n_buses();
    let e = grid.ac_branches.len();
    let mut prog = ConicProgram::new();
    let d0 = prog.add_vars("W diag", n);
    let re0 = prog.add_vars("W re", e);
    let im0 = prog.add_vars("W im", e);
    let mut off = HashMap::new();
    for (k, br) in grid.ac_branches.iter().enumerate() {
        let (i, j) = (br.from, br.to);
        if i < j {
            off.insert((i, j), (re0 + k, im0 + k, 1.0));
        } else {
            off.insert((j, i), (re0 + k, im0 + k, -1.0));
        }
    }
    let gram = GramVars {
        diag: (d0..d0 + n).collect(),
        off,
    };
    let market = assemble_market(&mut prog, cs, grid, &gram);
    let cones = grid
        .ac_branches
        .iter()
        .enumerate()
        .map(|(k, br)| {
            prog.add_constraint(
                format!("branch {k} block psd"),
                ConeKind::RotatedSoc,
                vec![
                    Affine::var(d0 + br.from),
                    Affine::var(d0 + br.to),
                    Affine::var(re0 + k),
                    Affine::var(im0 + k),
                ],
            )
        })
        .collect();
    (prog, SocrLayout { gram, market, cones })
}

/// Hermitian 2×2 block `[[a, c], [conj(c), b]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Block2 {
    pub a: f64,
    pub b: f64,
    pub c: Complex64,
}

impl Block2 {
    /// Eigenvalues, larger first.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mean = 0.5 * (self.a + self.b);
        let r = (0.25 * (self.a - self.b).powi(2) + self.c.norm_sqr()).sqrt();
        (mean + r, mean - r)
    }

    /// `trace(self * other)`.
    pub fn trace_with(&self, other: &Block2) -> f64 {
        self.a * other.a + self.b * other.b + 2.0 * (self.c * other.c.conj()).re
    }

    pub fn norm(&self) -> f64 {
        (self.a * self.a + self.b * self.b + 2.0 * self.c.norm_sqr()).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DualIdentityResiduals {
    /// Largest mismatch between `Ψ` and the branch duals on the AC pattern,
    /// relative to `max(1, max |Ψ|)`.
    pub pattern: f64,
    /// Largest entry of `ψ`, relative to `max(1, max |Ψ|)`.
    pub dc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SocrSolution {
    pub w: PartialGram,
    pub p: Vec<f64>,
    /// Dispatch per generator and per load.
    pub gen_dispatch: Vec<[f64; 2]>,
    pub load_dispatch: Vec<[f64; 2]>,
    /// Bus-level totals `g_n`, `d_n`.
    pub g: Vec<[f64; 2]>,
    pub d: Vec<[f64; 2]>,
    /// Power-balance duals in $/h per p.u.: the marginal welfare loss of
    /// additional withdrawal at the bus.
    pub lambda: Vec<[f64; 2]>,
    pub mu: Vec<f64>,
    /// Psd dual of each branch block.
    pub lambda_k: Vec<Block2>,
    pub objective: f64,
    /// Backend dual objective, unscaled.
    pub solver_dual_objective: f64,
    pub residuals: Residuals,
    pub dual_identity: DualIdentityResiduals,
    /// `trace(Λ_k Ξ_k(W))` per branch.
    pub complementarity: Vec<f64>,
    pub base_mva: f64,
}

impl SocrSolution {
    /// Prices in $/MWh.
    pub fn lmp(&self) -> Vec<[f64; 2]> {
        self.lambda.iter().map(|l| [l[0] / self.base_mva, l[1] / self.base_mva]).collect()
    }

    pub fn block(&self, pairs: &[(usize, usize)], k: usize) -> Block2 {
        let (a, b, c) = self.w.block(pairs, k);
        Block2 { a, b, c }
    }
}

/// Reads dispatch, DC and dual values of the market part.
pub(crate) struct MarketValues {
    pub p: Vec<f64>,
    pub gen: Vec<[f64; 2]>,
    pub load: Vec<[f64; 2]>,
    pub g: Vec<[f64; 2]>,
    pub d: Vec<[f64; 2]>,
    pub lambda: Vec<[f64; 2]>,
    pub mu: Vec<f64>,
}

pub(crate) fn market_values(sol: &ConicSolution, layout: &MarketLayout, cs: &ConstraintSystem, grid: &Grid) -> MarketValues {
    let n = grid.n_buses();
    let x = &sol.x;
    let s = layout.obj_scale;
    let p = x[layout.dc..layout.dc + cs.dc.n_vars].to_vec();
    let gen: Vec<[f64; 2]> = layout.gen.iter().map(|&v| [x[v], x[v + 1]]).collect();
    let load: Vec<[f64; 2]> = grid
        .loads
        .iter()
        .zip(&layout.load)
        .map(|(spec, var)| match (var, &spec.region) {
            (Some(v), _) => [x[*v], x[v + 1]],
            (None, LoadRegion::Fixed { p, q }) => [*p, *q],
            (None, _) => unreachable!(),
        })
        .collect();
    let mut g = vec![[0.0; 2]; n];
    for (spec, val) in grid.generators.iter().zip(&gen) {
        g[spec.bus][0] += val[0];
        g[spec.bus][1] += val[1];
    }
    let mut d = vec![[0.0; 2]; n];
    for (spec, val) in grid.loads.iter().zip(&load) {
        d[spec.bus][0] += val[0];
        d[spec.bus][1] += val[1];
    }
    let y = &sol.duals[layout.balance];
    let lambda = (0..n).map(|i| [y[i] * s, y[n + i] * s]).collect();
    let mu = sol.duals[layout.ineq]
        .iter()
        .zip(&layout.row_scale)
        .map(|(v, k)| v * s / k)
        .collect();
    MarketValues {
        p,
        gen,
        load,
        g,
        d,
        lambda,
        mu,
    }
}

/// Maps a solved relaxation back to grid quantities and checks the dual
/// identities.
pub fn extract_solution(
    prog: &ConicProgram,
    sol: &ConicSolution,
    layout: &SocrLayout,
    cs: &ConstraintSystem,
    grid: &Grid,
) -> Result<SocrSolution> {
    if sol.status != Status::Optimal {
        return Err(Error::NotOptimal);
    }
    let x = &sol.x;
    let s = layout.market.obj_scale;
    let n = grid.n_buses();
    let w = PartialGram {
        diag: layout.gram.diag.iter().map(|&v| x[v]).collect(),
        offdiag: grid
            .ac_branches
            .iter()
            .map(|br| {
                let key = (br.from.min(br.to), br.from.max(br.to));
                let (re, im, sign) = layout.gram.off[&key];
                // stored orientation is from -> to, see build_socr
                debug_assert_eq!(sign, if br.from < br.to { 1.0 } else { -1.0 });
                Complex64::new(x[re], x[im])
            })
            .collect(),
    };
    let mv = market_values(sol, &layout.market, cs, grid);
    let lambda_k: Vec<Block2> = layout
        .cones
        .iter()
        .map(|&c| {
            let y = &sol.duals[c];
            Block2 {
                a: y[0] * s,
                b: y[1] * s,
                c: Complex64::new(y[2], y[3]) * (0.5 * s),
            }
        })
        .collect();

    let psi = cs.assemble_psi(&mv.lambda, &mv.mu)?;
    let norm = psi.max_abs().max(1.0);
    let mut pattern: f64 = 0.0;
    let mut diag = vec![0.0; n];
    for (k, &(i, j)) in cs.ac_pairs.iter().enumerate() {
        diag[i] += lambda_k[k].a;
        diag[j] += lambda_k[k].b;
        pattern = pattern.max((psi.get(i, j) - lambda_k[k].c).norm());
    }
    for (i, dv) in diag.iter().enumerate() {
        pattern = pattern.max((psi.get(i, i).re - dv).abs());
    }
    let psi_vec = cs.assemble_psi_vec(&mv.lambda, &mv.mu)?;
    let dc_res = psi_vec.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dual_identity = DualIdentityResiduals {
        pattern: pattern / norm,
        dc: dc_res / norm,
    };
    if dual_identity.pattern > DUAL_IDENTITY_TOL {
        return Err(Error::DualReconstructionMismatch(dual_identity.pattern));
    }

    let complementarity = (0..grid.ac_branches.len())
        .map(|k| {
            let (a, b, c) = w.block(&cs.ac_pairs, k);
            lambda_k[k].trace_with(&Block2 { a, b, c })
        })
        .collect();

    Ok(SocrSolution {
        w,
        p: mv.p,
        gen_dispatch: mv.gen,
        load_dispatch: mv.load,
        g: mv.g,
        d: mv.d,
        lambda: mv.lambda,
        mu: mv.mu,
        lambda_k,
        objective: sol.objective * s,
        solver_dual_objective: conic::dual_objective(prog, &sol.duals) * s,
        residuals: sol.residuals,
        dual_identity,
        complementarity,
        base_mva: grid.base_mva,
    })
}

/// Builds, solves and extracts the relaxation.
pub fn solve_socr(grid: &Grid, tol: f64) -> Result<SocrSolution> {
    let cs = ConstraintSystem::build(grid)?;
    solve_socr_with(&cs, grid, tol)
}

pub fn solve_socr_with(cs: &ConstraintSystem, grid: &Grid, tol: f64) -> Result<SocrSolution> {
    let (prog, layout) = build_socr(cs, grid);
    let sol = conic::solve(&prog, tol);
    match sol.status {
        Status::Optimal => extract_solution(&prog, &sol, &layout, cs, grid),
        Status::Infeasible => Err(Error::Infeasible),
        Status::Unbounded => Err(Error::SolverFailure("relaxation reported unbounded".into())),
        Status::NumericalFailure => Err(Error::SolverFailure("interior-point method did not converge".into())),
    }
}

/// Consumer surplus and producer profit at price `lambda` for an optional
/// load and generator.
pub fn surplus_profit(lambda: [f64; 2], gen: Option<&GenSpec>, load: Option<&LoadSpec>) -> (f64, f64) {
    let surplus = load.map_or(0.0, |l| max_surplus(lambda, &l.region, &l.benefit).0);
    let profit = gen.map_or(0.0, |g| max_profit(lambda, &g.capability, &g.cost).0);
    (surplus, profit)
}

/// Dual objective `μ^T b + Σ surplus + Σ profit` recomputed from prices.
pub fn dual_objective(lambda: &[[f64; 2]], mu: &[f64], cs: &ConstraintSystem, grid: &Grid) -> f64 {
    let rows: f64 = cs.rows.iter().zip(mu).map(|(r, m)| r.b * m).sum();
    let profits: f64 = grid
        .generators
        .iter()
        .map(|g| surplus_profit(lambda[g.bus], Some(g), None).1)
        .sum();
    let surpluses: f64 = grid
        .loads
        .iter()
        .map(|l| surplus_profit(lambda[l.bus], None, Some(l)).0)
        .sum();
    rows + profits + surpluses
}

/// Fails when the recomputed dual objective deviates from the primal one by
/// more than `rel_tol (1 + |p|)`.
pub fn check_strong_duality(sol: &SocrSolution, cs: &ConstraintSystem, grid: &Grid, rel_tol: f64) -> Result<f64> {
    let d = dual_objective(&sol.lambda, &sol.mu, cs, grid);
    if (d - sol.objective).abs() > rel_tol * (1.0 + sol.objective.abs()) {
        return Err(Error::StrongDualityViolation {
            primal: sol.objective,
            dual: d,
        });
    }
    Ok(d)
}

/// Welfare `Σ B(d) - Σ C(g)` of a dispatch.
pub fn welfare(grid: &Grid, gen: &[[f64; 2]], load: &[[f64; 2]]) -> f64 {
    let b: f64 = grid.loads.iter().zip(load).map(|(l, d)| l.benefit.value(d[0])).sum();
    let c: f64 = grid.generators.iter().zip(gen).map(|(g, x)| g.cost.value(x[0])).sum();
    b - c
}
