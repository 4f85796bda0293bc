//! Linearized OPF: active power only, lossless lines, flat voltage profile.
//!
//! Line flows are `(θ_from - θ_to - shift) / (x · tap)` and branch limits
//! are the current ratings read as MW at nominal voltage. DC branches are
//! lossless controllable flows within their bounds.

use serde::Serialize;

use crate::conic::{self, Affine, ConeKind, ConicProgram, Status};
use crate::error::{Error, Result};
use crate::grid::{BenefitFn, Grid, LoadRegion};
use crate::socr::{add_benefit, add_cost, bounded_pair, objective_scale};

pub const DCOPF_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DcOpfSolution {
    /// Bus angles in radians, zero at the reference bus.
    pub theta: Vec<f64>,
    /// AC branch flows from `from` to `to`, p.u.
    pub flows: Vec<f64>,
    /// DC branch flows from `from` to `to`, p.u.
    pub dc_flows: Vec<f64>,
    /// Active dispatch per generator, p.u.
    pub dispatch: Vec<f64>,
    /// Active consumption per load, p.u.
    pub load: Vec<f64>,
    /// Balance duals, $/MWh.
    pub lmp: Vec<f64>,
    /// Welfare, $/h.
    pub objective: f64,
    /// `|Σ dispatch - Σ load|`, p.u.
    pub balance_residual: f64,
    /// Largest `|μ · slack|` over the branch-limit rows, $/h.
    pub complementarity: f64,
}

/// Susceptance-weighted flow coefficient `1 / (x · tap)`.
fn flow_coefficient(x: f64, tap: f64) -> f64 {
    1.0 / (x * tap)
}

/// Branch limit at nominal voltage; `None` when both terminals are unrated.
fn flow_limit(i_from: Option<f64>, i_to: Option<f64>) -> Option<f64> {
    match (i_from, i_to) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

pub fn solve_dcopf(grid: &Grid) -> Result<DcOpfSolution> {
    solve_dcopf_with(grid, DCOPF_TOL)
}

pub fn solve_dcopf_with(grid: &Grid, tol: f64) -> Result<DcOpfSolution> {
    grid.validate()?;
    let n = grid.n_buses();
    for (k, br) in grid.ac_branches.iter().enumerate() {
        if br.series_x == 0.0 {
            return Err(Error::ZeroImpedanceBranch(k));
        }
    }
    let scale = objective_scale(grid);
    let mut prog = ConicProgram::new();
    let theta = prog.add_vars("theta", n);
    prog.add_constraint("reference angle", ConeKind::Zero, vec![Affine::var(theta + grid.reference_bus)]);

    let flow_expr = |k: usize| -> Affine {
        let br = &grid.ac_branches[k];
        let b = flow_coefficient(br.series_x, br.tap);
        Affine::constant(-br.shift * b)
            .term(theta + br.from, b)
            .term(theta + br.to, -b)
    };

    let dc = prog.add_vars("dc flow", grid.dc_branches.len());
    for (d, br) in grid.dc_branches.iter().enumerate() {
        bounded_pair(&mut prog, &format!("dc {d}"), dc + d, br.p_min, br.p_max);
    }

    let mut gen = Vec::with_capacity(grid.generators.len());
    for (g, spec) in grid.generators.iter().enumerate() {
        let var = prog.add_vars(format!("gen {g}"), 1);
        let (lo, hi) = spec.capability.p_range();
        bounded_pair(&mut prog, &format!("gen {g} P"), var, lo, hi);
        add_cost(&mut prog, g, var, &spec.cost.scaled(1.0 / scale));
        gen.push(var);
    }
    let mut load = Vec::with_capacity(grid.loads.len());
    for (l, spec) in grid.loads.iter().enumerate() {
        match &spec.region {
            LoadRegion::Fixed { p, .. } => {
                prog.objective.constant += spec.benefit.value(*p) / scale;
                load.push(None);
            }
            LoadRegion::Box { p_min, p_max, .. } => {
                let var = prog.add_vars(format!("load {l}"), 1);
                bounded_pair(&mut prog, &format!("load {l} P"), var, *p_min, *p_max);
                let scaled = match &spec.benefit {
                    BenefitFn::Zero => BenefitFn::Zero,
                    BenefitFn::PiecewiseLinear { points } => BenefitFn::PiecewiseLinear {
                        points: points.iter().map(|p| [p[0], p[1] / scale]).collect(),
                    },
                };
                add_benefit(&mut prog, l, var, &scaled);
                load.push(Some(var));
            }
        }
    }

    // g - d - (net flow leaving the bus) = 0
    let mut rows = vec![Affine::default(); n];
    for (g, spec) in grid.generators.iter().enumerate() {
        rows[spec.bus].add_term(gen[g], 1.0);
    }
    for (l, spec) in grid.loads.iter().enumerate() {
        match (&spec.region, load[l]) {
            (_, Some(var)) => rows[spec.bus].add_term(var, -1.0),
            (LoadRegion::Fixed { p, .. }, None) => rows[spec.bus].constant -= p,
            _ => unreachable!(),
        }
    }
    for k in 0..grid.ac_branches.len() {
        let br = &grid.ac_branches[k];
        let f = flow_expr(k);
        for (v, c) in &f.terms {
            rows[br.from].add_term(*v, -c);
            rows[br.to].add_term(*v, *c);
        }
        rows[br.from].constant -= f.constant;
        rows[br.to].constant += f.constant;
    }
    for (d, br) in grid.dc_branches.iter().enumerate() {
        rows[br.from].add_term(dc + d, -1.0);
        rows[br.to].add_term(dc + d, 1.0);
    }
    let balance = prog.add_constraint("power balance", ConeKind::Zero, rows);

    let mut limited = Vec::new();
    let mut limit_rows = Vec::new();
    for (k, br) in grid.ac_branches.iter().enumerate() {
        if let Some(limit) = flow_limit(br.i_max_from, br.i_max_to) {
            let f = flow_expr(k);
            limit_rows.push(f.clone().scaled(-1.0).plus(limit));
            limit_rows.push(f.plus(limit));
            limited.push(k);
        }
    }
    let limits = prog.add_constraint("flow limits", ConeKind::Nonneg, limit_rows);

    let sol = conic::solve(&prog, tol);
    match sol.status {
        Status::Optimal => {}
        Status::Infeasible => return Err(Error::Infeasible),
        Status::Unbounded => return Err(Error::SolverFailure("linearized OPF reported unbounded".into())),
        Status::NumericalFailure => {
            return Err(Error::SolverFailure("interior-point method did not converge".into()))
        }
    }
    let x = &sol.x;
    let flows: Vec<f64> = (0..grid.ac_branches.len()).map(|k| flow_expr(k).eval(x)).collect();
    let dispatch: Vec<f64> = gen.iter().map(|&v| x[v]).collect();
    let load_p: Vec<f64> = grid
        .loads
        .iter()
        .zip(&load)
        .map(|(spec, var)| match (var, &spec.region) {
            (Some(v), _) => x[*v],
            (None, LoadRegion::Fixed { p, .. }) => *p,
            (None, _) => unreachable!(),
        })
        .collect();
    let lmp = sol.duals[balance].iter().map(|y| y * scale / grid.base_mva).collect();
    let mu = &sol.duals[limits];
    let complementarity = limited
        .iter()
        .enumerate()
        .flat_map(|(r, &k)| {
            let limit = flow_limit(grid.ac_branches[k].i_max_from, grid.ac_branches[k].i_max_to).unwrap_or(0.0);
            [
                (mu[2 * r] * (limit - flows[k])).abs(),
                (mu[2 * r + 1] * (limit + flows[k])).abs(),
            ]
        })
        .fold(0.0, f64::max)
        * scale;
    Ok(DcOpfSolution {
        theta: x[theta..theta + n].to_vec(),
        flows,
        dc_flows: x[dc..dc + grid.dc_branches.len()].to_vec(),
        balance_residual: (dispatch.iter().sum::<f64>() - load_p.iter().sum::<f64>()).abs(),
        dispatch,
        load: load_p,
        lmp,
        objective: sol.objective * scale,
        complementarity,
    })
}
