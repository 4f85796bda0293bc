//! Semidefinite relaxation `V ⪰ 0` over the full Hermitian Gram matrix.
//!
//! Only meant for small grids: it is a cross-check for the cone relaxation,
//! never part of the pricing path. Entries of `V` outside the AC pattern do
//! not appear in any constraint, so the relaxation is posed over the maximal
//! cliques of a chordal extension of that pattern: a partial Hermitian matrix
//! on a chordal pattern has a PSD completion exactly when every clique block
//! is PSD. Each block is constrained through its real embedding
//! `[[Re V, -Im V], [Im V, Re V]] ⪰ 0` and the full `V` is recovered by
//! completion. This keeps the optimal value of the dense formulation while
//! avoiding its free entries, which stall the interior-point method.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use std::collections::{BTreeSet, HashMap};

use crate::conic::{self, psd_index, psd_len, Affine, ConeKind, ConicProgram, Status};
use crate::error::{Error, Result};
use crate::grid::{Grid, LoadRegion};
use crate::matrices::ConstraintSystem;
use crate::socr::{assemble_market, market_values, GramVars, MarketLayout};

/// Default bus count above which the relaxation refuses to build.
pub const DEFAULT_BUS_CAP: usize = 12;

/// Chordal extension of an undirected pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct ChordalPattern {
    /// Perfect elimination order.
    pub order: Vec<usize>,
    /// Neighbours of each vertex eliminated after it; always a clique.
    pub later: Vec<Vec<usize>>,
    /// Maximal cliques, members sorted.
    pub cliques: Vec<Vec<usize>>,
    /// Edges `(i, j)` with `i < j`, fill included.
    pub edges: BTreeSet<(usize, usize)>,
}

/// Minimum-degree elimination on the pattern given by `edges`.
pub fn chordal_extension(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> ChordalPattern {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (i, j) in edges {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut alive: BTreeSet<usize> = (0..n).collect();
    let mut order = Vec::with_capacity(n);
    let mut later = vec![Vec::new(); n];
    let mut filled = BTreeSet::new();
    let mut candidates: Vec<Vec<usize>> = Vec::new();
    while let Some(&v) = alive.iter().min_by_key(|&&v| (adj[v].len(), v)) {
        let nb: Vec<usize> = adj[v].iter().copied().collect();
        for (a, &x) in nb.iter().enumerate() {
            filled.insert((v.min(x), v.max(x)));
            for &y in &nb[a + 1..] {
                adj[x].insert(y);
                adj[y].insert(x);
            }
            adj[x].remove(&v);
        }
        let mut clique = nb.clone();
        clique.push(v);
        clique.sort_unstable();
        candidates.push(clique);
        later[v] = nb;
        order.push(v);
        alive.remove(&v);
    }
    let cliques = candidates
        .iter()
        .enumerate()
        .filter(|(k, c)| {
            !candidates
                .iter()
                .enumerate()
                .any(|(m, o)| m != *k && o.len() >= c.len() && c.iter().all(|x| o.contains(x)) && (o.len() > c.len() || m < *k))
        })
        .map(|(_, c)| c.clone())
        .collect();
    ChordalPattern {
        order,
        later,
        cliques,
        edges: filled,
    }
}

#[derive(Debug, Clone)]
pub struct SdrLayout {
    pub gram: GramVars,
    pub market: MarketLayout,
    pub pattern: ChordalPattern,
    /// PSD constraint per maximal clique, in `pattern.cliques` order.
    pub blocks: Vec<usize>,
}

pub fn build_sdr(cs: &ConstraintSystem, grid: &Grid, cap: usize) -> Result<(ConicProgram, SdrLayout)> {
    let n = grid.n_buses();
    if n > cap {
        return Err(Error::TooLarge { n, cap });
    }
    let pattern = chordal_extension(n, cs.ac_pairs.iter().copied());
    let mut prog = ConicProgram::new();
    let d0 = prog.add_vars("V diag", n);
    let mut off = HashMap::new();
    for &(i, j) in &pattern.edges {
        let re = prog.add_vars(format!("V re {i},{j}"), 2);
        off.insert((i, j), (re, re + 1, 1.0));
    }
    let gram = GramVars {
        diag: (d0..d0 + n).collect(),
        off,
    };
    let market = assemble_market(&mut prog, cs, grid, &gram);

    let re_entry = |i: usize, j: usize| -> Affine {
        if i == j {
            Affine::var(gram.diag[i])
        } else {
            Affine::var(gram.off[&(i.min(j), i.max(j))].0)
        }
    };
    let im_entry = |i: usize, j: usize| -> Affine {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => Affine::default(),
            std::cmp::Ordering::Less => Affine::var(gram.off[&(i, j)].1),
            std::cmp::Ordering::Greater => Affine::var(gram.off[&(j, i)].1).scaled(-1.0),
        }
    };
    let mut blocks = Vec::with_capacity(pattern.cliques.len());
    for (k, clique) in pattern.cliques.iter().enumerate() {
        let size = clique.len();
        let m = 2 * size;
        let mut rows = vec![Affine::default(); psd_len(m)];
        for c in 0..m {
            for r in 0..=c {
                let (bi, bj) = (clique[r % size], clique[c % size]);
                rows[psd_index(r, c)] = match (r < size, c < size) {
                    (true, true) | (false, false) => re_entry(bi, bj),
                    (true, false) => im_entry(bi, bj).scaled(-1.0),
                    (false, true) => unreachable!("r <= c"),
                };
            }
        }
        blocks.push(prog.add_constraint(format!("clique {k} psd"), ConeKind::Psd(m), rows));
    }
    Ok((
        prog,
        SdrLayout {
            gram,
            market,
            pattern,
            blocks,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdrSolution {
    /// Gram matrix: solved entries on the chordal pattern, completed elsewhere.
    pub v: DMatrix<Complex64>,
    pub p: Vec<f64>,
    pub gen_dispatch: Vec<[f64; 2]>,
    pub load_dispatch: Vec<[f64; 2]>,
    pub g: Vec<[f64; 2]>,
    pub d: Vec<[f64; 2]>,
    pub lambda: Vec<[f64; 2]>,
    pub objective: f64,
    /// Eigenvalues of `V`, largest first.
    pub eigenvalues: Vec<f64>,
}

impl SdrSolution {
    /// `λ₂ / λ₁`, zero for a rank-one `V`.
    pub fn rank_ratio(&self) -> f64 {
        match self.eigenvalues.as_slice() {
            [l1, l2, ..] if *l1 > 0.0 => l2.max(0.0) / l1,
            _ => 0.0,
        }
    }
}

/// Eigenvalues of a Hermitian matrix in descending order.
pub fn hermitian_spectrum(v: &DMatrix<Complex64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(v.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

fn principal(v: &DMatrix<Complex64>, rows: &[usize], cols: &[usize]) -> DMatrix<Complex64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| v[(rows[r], cols[c])])
}

/// Fills the entries of `v` outside `pattern` so that `v` is PSD whenever
/// every clique block is. Vertices are added in reverse elimination order;
/// a vertex joins through its separator `S` as `V_vu = V_vS V_SS⁺ V_Su`,
/// which is the maximum-determinant choice. A vertex with an empty separator
/// starts a new component and is joined through the leading eigenpair of the
/// block built so far, which keeps a rank-one solution rank one.
pub fn complete_gram(v: &mut DMatrix<Complex64>, pattern: &ChordalPattern) {
    let mut done: Vec<usize> = Vec::new();
    for &x in pattern.order.iter().rev() {
        let sep = &pattern.later[x];
        let rest: Vec<usize> = done.iter().copied().filter(|u| !sep.contains(u)).collect();
        if !rest.is_empty() {
            let fill = if sep.is_empty() {
                let block = principal(v, &done, &done);
                let eig = SymmetricEigen::new(block);
                let k = eig.eigenvalues.imax();
                let scale = eig.eigenvalues[k].max(0.0).sqrt() * v[(x, x)].re.max(0.0).sqrt();
                let u = eig.eigenvectors.column(k).into_owned();
                let pos = |w: usize| done.iter().position(|&d| d == w).unwrap();
                DMatrix::from_fn(1, rest.len(), |_, c| u[pos(rest[c])].conj() * scale)
            } else {
                let s_block = principal(v, sep, sep);
                let eig = SymmetricEigen::new(s_block);
                let top = eig.eigenvalues.amax();
                let inv_diag = eig.eigenvalues.map(|l| if l > 1e-12 * top { 1.0 / l } else { 0.0 });
                let q = &eig.eigenvectors;
                let pinv = q * DMatrix::from_diagonal(&inv_diag.map(|l| Complex64::new(l, 0.0))) * q.adjoint();
                principal(v, &[x], sep) * pinv * principal(v, sep, &rest)
            };
            for (c, &u) in rest.iter().enumerate() {
                v[(x, u)] = fill[(0, c)];
                v[(u, x)] = fill[(0, c)].conj();
            }
        }
        done.push(x);
    }
}

pub fn solve_sdr(grid: &Grid, tol: f64, cap: usize) -> Result<SdrSolution> {
    let cs = ConstraintSystem::build(grid)?;
    solve_sdr_with(&cs, grid, tol, cap)
}

pub fn solve_sdr_with(cs: &ConstraintSystem, grid: &Grid, tol: f64, cap: usize) -> Result<SdrSolution> {
    let (prog, layout) = build_sdr(cs, grid, cap)?;
    let sol = conic::solve(&prog, tol);
    match sol.status {
        Status::Optimal => {}
        Status::Infeasible => return Err(Error::Infeasible),
        Status::Unbounded => return Err(Error::SolverFailure("relaxation reported unbounded".into())),
        Status::NumericalFailure => {
            return Err(Error::SolverFailure("interior-point method did not converge".into()))
        }
    }
    let n = grid.n_buses();
    let x = &sol.x;
    let mut v = DMatrix::zeros(n, n);
    for i in 0..n {
        v[(i, i)] = Complex64::new(x[layout.gram.diag[i]], 0.0);
    }
    for (&(i, j), &(re, im, _)) in &layout.gram.off {
        v[(i, j)] = Complex64::new(x[re], x[im]);
        v[(j, i)] = Complex64::new(x[re], -x[im]);
    }
    complete_gram(&mut v, &layout.pattern);
    let mv = market_values(&sol, &layout.market, cs, grid);
    Ok(SdrSolution {
        eigenvalues: hermitian_spectrum(&v),
        v,
        p: mv.p,
        gen_dispatch: mv.gen,
        load_dispatch: mv.load,
        g: mv.g,
        d: mv.d,
        lambda: mv.lambda,
        objective: sol.objective * layout.market.obj_scale,
    })
}

/// Voltages and DC set points to build a strictly feasible point around.
#[derive(Debug, Clone, PartialEq)]
pub struct StrictSeed {
    pub v: Vec<Complex64>,
    pub p: Vec<f64>,
}

impl StrictSeed {
    /// Zero angles, magnitudes at the middle of each voltage band and DC
    /// variables at the middle of their ranges.
    pub fn flat_start(grid: &Grid, cs: &ConstraintSystem) -> Self {
        StrictSeed {
            v: grid
                .buses
                .iter()
                .map(|b| Complex64::new(0.5 * (b.v_min + b.v_max), 0.0))
                .collect(),
            p: cs
                .dc
                .lower
                .iter()
                .zip(&cs.dc.upper)
                .map(|(lo, hi)| 0.5 * (lo + hi))
                .collect(),
        }
    }
}

/// Candidate `(V, p, g, d)` with `V = v v^H + ε I` and the strictness report.
#[derive(Debug, Clone)]
pub struct StrictPoint {
    pub v: DMatrix<Complex64>,
    pub p: Vec<f64>,
    pub gen_dispatch: Vec<[f64; 2]>,
    pub load_dispatch: Vec<[f64; 2]>,
    /// Smallest `b - (trace(C V) + c^T p)` over the stacked rows.
    pub min_row_slack: f64,
    pub min_eigenvalue: f64,
    /// Smallest radius, over buses, of the box around `g_n - d_n` that stays
    /// inside `G_n - D_n`.
    pub min_interior_margin: f64,
    pub strict: bool,
}

/// Dispatch at one bus realizing `target + t e` for the four axis directions
/// `e`, with the common radius `t` maximized (capped at 1).
fn interior_dispatch(grid: &Grid, bus: usize, target: [f64; 2]) -> Option<(f64, Vec<(usize, [f64; 2])>, Vec<(usize, [f64; 2])>)> {
    let gens: Vec<usize> = (0..grid.generators.len()).filter(|&g| grid.generators[g].bus == bus).collect();
    let loads: Vec<usize> = (0..grid.loads.len()).filter(|&l| grid.loads[l].bus == bus).collect();
    let dirs = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];

    let mut prog = ConicProgram::new();
    let t = prog.add_vars("radius", 1);
    prog.objective = Affine::var(t);
    prog.add_constraint("radius range", ConeKind::Nonneg, vec![Affine::var(t), Affine::constant(1.0).term(t, -1.0)]);
    let mut gen_vars = Vec::new();
    let mut load_vars = Vec::new();
    for dir in &dirs {
        let mut balance = [Affine::constant(-target[0]).term(t, -dir[0]), Affine::constant(-target[1]).term(t, -dir[1])];
        let mut gv = Vec::new();
        for &g in &gens {
            let var = prog.add_vars(format!("gen {g}"), 2);
            let rows = grid.generators[g]
                .capability
                .halfplanes()
                .into_iter()
                .map(|(a, b)| Affine::constant(b).term(var, -a[0]).term(var + 1, -a[1]))
                .collect();
            prog.add_constraint(format!("gen {g} capability"), ConeKind::Nonneg, rows);
            balance[0].add_term(var, 1.0);
            balance[1].add_term(var + 1, 1.0);
            gv.push(var);
        }
        let mut lv = Vec::new();
        for &l in &loads {
            match grid.loads[l].region {
                LoadRegion::Fixed { p, q } => {
                    balance[0].constant -= p;
                    balance[1].constant -= q;
                    lv.push(None);
                }
                LoadRegion::Box {
                    p_min,
                    p_max,
                    q_min,
                    q_max,
                } => {
                    let var = prog.add_vars(format!("load {l}"), 2);
                    prog.add_constraint(
                        format!("load {l} region"),
                        ConeKind::Nonneg,
                        vec![
                            Affine::var(var).plus(-p_min),
                            Affine::constant(p_max).term(var, -1.0),
                            Affine::var(var + 1).plus(-q_min),
                            Affine::constant(q_max).term(var + 1, -1.0),
                        ],
                    );
                    balance[0].add_term(var, -1.0);
                    balance[1].add_term(var + 1, -1.0);
                    lv.push(Some(var));
                }
            }
        }
        prog.add_constraint("balance", ConeKind::Zero, balance.to_vec());
        gen_vars.push(gv);
        load_vars.push(lv);
    }
    let sol = conic::solve(&prog, 1e-9);
    if sol.status != Status::Optimal {
        return None;
    }
    let x = &sol.x;
    // the average of the four decompositions realizes the target itself
    let gen_out = gens
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            let mut s = [0.0; 2];
            for gv in &gen_vars {
                s[0] += 0.25 * x[gv[k]];
                s[1] += 0.25 * x[gv[k] + 1];
            }
            (g, s)
        })
        .collect();
    let load_out = loads
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let s = match grid.loads[l].region {
                LoadRegion::Fixed { p, q } => [p, q],
                LoadRegion::Box { .. } => {
                    let mut s = [0.0; 2];
                    for lv in &load_vars {
                        let var = lv[k].expect("flexible load has variables");
                        s[0] += 0.25 * x[var];
                        s[1] += 0.25 * x[var + 1];
                    }
                    s
                }
            };
            (l, s)
        })
        .collect();
    Some((x[t], gen_out, load_out))
}

/// Builds `V = v v^H + ε I` around `seed` (flat start when `None`), chooses
/// dispatch absorbing the resulting injections and reports whether every
/// inequality holds strictly, `V ≻ 0`, and every net injection lies in the
/// interior of its bus's feasible set.
pub fn strict_point(cs: &ConstraintSystem, grid: &Grid, eps: f64, seed: Option<&StrictSeed>) -> Result<StrictPoint> {
    const MARGIN_TOL: f64 = 1e-9;
    let n = grid.n_buses();
    let owned;
    let seed = match seed {
        Some(s) => s,
        None => {
            owned = StrictSeed::flat_start(grid, cs);
            &owned
        }
    };
    if seed.v.len() != n || seed.p.len() != cs.dc.n_vars {
        return Err(Error::DimensionMismatch("seed does not match the grid".into()));
    }
    let mut v = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            v[(i, j)] = seed.v[i] * seed.v[j].conj();
        }
        v[(i, i)] += eps;
    }
    let w = |i: usize, j: usize| v[(i, j)];
    let min_row_slack = cs
        .rows
        .iter()
        .map(|r| r.b - r.lhs(w, &seed.p))
        .fold(f64::INFINITY, f64::min);
    let min_eigenvalue = hermitian_spectrum(&v).last().copied().unwrap_or(0.0);

    let (wp, wq) = cs.dc.withdrawal(&seed.p);
    let mut gen_dispatch = vec![[0.0; 2]; grid.generators.len()];
    let mut load_dispatch = vec![[0.0; 2]; grid.loads.len()];
    let mut min_interior_margin = f64::INFINITY;
    for bus in 0..n {
        let target = [cs.p[bus].trace_with(w) + wp[bus], cs.q[bus].trace_with(w) + wq[bus]];
        let (t, gens, loads) = interior_dispatch(grid, bus, target).ok_or_else(|| {
            Error::NoStrictPoint(format!(
                "bus {} cannot absorb injection ({:.4}, {:.4}) p.u.",
                grid.buses[bus].label, target[0], target[1]
            ))
        })?;
        min_interior_margin = min_interior_margin.min(t);
        for (g, s) in gens {
            gen_dispatch[g] = s;
        }
        for (l, s) in loads {
            load_dispatch[l] = s;
        }
    }
    let strict = min_row_slack > MARGIN_TOL && min_eigenvalue > MARGIN_TOL && min_interior_margin > MARGIN_TOL;
    Ok(StrictPoint {
        v,
        p: seed.p.clone(),
        gen_dispatch,
        load_dispatch,
        min_row_slack,
        min_eigenvalue,
        min_interior_margin,
        strict,
    })
}
