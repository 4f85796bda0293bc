//! Nodal prices from a solved relaxation and the certificates deciding
//! whether they are genuine locational marginal prices.
//!
//! Three independent witnesses of exactness are computed: the rank of each
//! 2×2 branch block of the Gram matrix, the distance of the dual prices from
//! the critical subspaces (off-diagonal entries of `Ψ`), and the mismatch κ
//! between the relaxed Gram entries and those of the recovered voltages.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{max_profit, Grid};
use crate::matrices::ConstraintSystem;
use crate::socr::{self, check_strong_duality, Block2, PartialGram, SocrSolution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PricingConfig {
    pub solver_tol: f64,
    /// Threshold on rank ratios and on κ̄.
    pub exact_tol: f64,
    /// Subspace-avoidance threshold relative to `max(1, max |Ψ|)`.
    pub margin_tol: f64,
    /// Relative tolerance of the dual consistency checks.
    pub check_tol: f64,
}

impl Default for PricingConfig {
    fn default() -> Self {
        PricingConfig {
            solver_tol: crate::conic::DEFAULT_TOL,
            exact_tol: 1e-6,
            margin_tol: 1e-5,
            check_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankInfo {
    pub lambda1: f64,
    pub lambda2: f64,
    pub ratio: f64,
    pub pass: bool,
}

/// Eigenvalue ratio `|λ2| / max(λ1, floor)` of a 2×2 block, with the floor
/// at `1e-12` times the largest diagonal entry.
pub fn rank_ratio(block: &Block2) -> (f64, f64, f64) {
    let (l1, l2) = block.eigenvalues();
    let floor = 1e-12 * block.a.max(block.b).max(f64::MIN_POSITIVE);
    (l1, l2, l2.abs() / l1.max(floor))
}

pub fn rank_condition(w: &PartialGram, pairs: &[(usize, usize)], tol: f64) -> Vec<RankInfo> {
    (0..pairs.len())
        .map(|k| {
            let (a, b, c) = w.block(pairs, k);
            let (lambda1, lambda2, ratio) = rank_ratio(&Block2 { a, b, c });
            RankInfo {
                lambda1,
                lambda2,
                ratio,
                pass: ratio <= tol,
            }
        })
        .collect()
}

/// Voltages whose Gram matrix agrees with `w` on a spanning tree of the AC
/// subgraph: magnitudes from the diagonal, angles accumulated from the
/// reference bus along breadth-first tree edges.
pub fn recover_voltages(w: &PartialGram, grid: &Grid) -> Result<Vec<Complex64>> {
    let order = grid.ac_bfs();
    if order.len() != grid.n_buses() {
        return Err(Error::DisconnectedAcSubgraph);
    }
    let mut theta = vec![0.0; grid.n_buses()];
    for &(bus, via) in &order {
        if let Some(k) = via {
            let br = &grid.ac_branches[k];
            // arg W_ij = θ_i - θ_j for i = from, j = to
            let phase = w.offdiag[k].arg();
            theta[bus] = if bus == br.to {
                theta[br.from] - phase
            } else {
                theta[br.to] + phase
            };
        }
    }
    Ok(w.diag
        .iter()
        .zip(&theta)
        .map(|(d, t)| Complex64::from_polar(d.max(0.0).sqrt(), *t))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelaxationError {
    pub per_branch: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

/// `κ_k = |(v_i conj(v_j) - W_ij) / (v_i conj(v_j))|` with its mean and maximum.
pub fn relaxation_error(w: &PartialGram, v: &[Complex64], pairs: &[(usize, usize)]) -> Result<RelaxationError> {
    let mut per_branch = Vec::with_capacity(pairs.len());
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let vv = v[i] * v[j].conj();
        if vv.norm() < 1e-12 {
            return Err(Error::ZeroDenominator(k));
        }
        per_branch.push(((vv - w.offdiag[k]) / vv).norm());
    }
    let max = per_branch.iter().copied().fold(0.0, f64::max);
    let mean = if per_branch.is_empty() {
        0.0
    } else {
        per_branch.iter().sum::<f64>() / per_branch.len() as f64
    };
    Ok(RelaxationError { per_branch, mean, max })
}

/// `|[Ψ(Λ, μ)]_{from(k), to(k)}|` per AC branch together with `max |Ψ|`.
pub fn subspace_margins(cs: &ConstraintSystem, lambda: &[[f64; 2]], mu: &[f64]) -> Result<(Vec<f64>, f64)> {
    let psi = cs.assemble_psi(lambda, mu)?;
    Ok((cs.ac_pairs.iter().map(|&(i, j)| psi.get(i, j).norm()).collect(), psi.max_abs()))
}

/// Branches whose end-bus prices alone guarantee exactness: both price
/// vectors nonnegative and the active prices summing to a positive value.
pub fn sign_condition_flags(lambda: &[[f64; 2]], pairs: &[(usize, usize)]) -> Vec<bool> {
    let scale = lambda.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let neg_tol = 1e-9 * scale;
    let pos_tol = 1e-6 * scale;
    pairs
        .iter()
        .map(|&(i, j)| {
            let nonneg = lambda[i].iter().chain(&lambda[j]).all(|v| *v >= -neg_tol);
            nonneg && lambda[i][0] + lambda[j][0] > pos_tol
        })
        .collect()
}

/// Per-branch residual of the branch-dual identities: inside a critical
/// subspace the branch dual must vanish, outside it its off-diagonal entry
/// must equal `[Ψ]_{ij}`. Residuals are relative to `max(1, max |Ψ|)`.
pub fn lambda_k_zero_check(
    sol: &SocrSolution,
    cs: &ConstraintSystem,
    margins: &[f64],
    margin_tol: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    let psi = cs.assemble_psi(&sol.lambda, &sol.mu)?;
    let scale = psi.max_abs().max(1.0);
    let mut out = Vec::with_capacity(margins.len());
    for (k, &(i, j)) in cs.ac_pairs.iter().enumerate() {
        let lk = &sol.lambda_k[k];
        let (res, what) = if margins[k] <= margin_tol * scale {
            (lk.norm() / scale, "branch dual inside a critical subspace is nonzero")
        } else {
            ((lk.c - psi.get(i, j)).norm() / scale, "branch dual off-diagonal differs from Psi")
        };
        if res > tol {
            return Err(Error::CertificateInconsistency {
                branch: k,
                reason: format!("{what} (residual {res:.3e})"),
            });
        }
        out.push(res);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubspaceDimension {
    pub rank: usize,
    pub dim: usize,
}

/// Rank of the real `2 × (2N + M)` matrix collecting `[P_n]_ij`, `[Q_n]_ij`
/// and `[C_m]_ij` for branch `k`, and the dimension of its null space.
pub fn subspace_dimension(cs: &ConstraintSystem, k: usize) -> SubspaceDimension {
    let (i, j) = cs.ac_pairs[k];
    let cols: Vec<Complex64> = cs
        .p
        .iter()
        .chain(&cs.q)
        .map(|m| m.get(i, j))
        .chain(cs.rows.iter().map(|r| r.c.get(i, j)))
        .collect();
    let l = DMatrix::from_fn(2, cols.len(), |r, c| if r == 0 { cols[c].re } else { cols[c].im });
    let sv = l.svd(false, false).singular_values;
    let top = sv.iter().copied().fold(0.0, f64::max);
    let rank = sv.iter().filter(|s| **s > 1e-10 * top.max(f64::MIN_POSITIVE)).count();
    SubspaceDimension {
        rank,
        dim: cols.len() - rank,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathologicalVerdict {
    pub pathological: bool,
    pub branches: Vec<usize>,
}

/// The price profile is pathological when it lies in some critical subspace,
/// i.e. some margin does not exceed `threshold`.
pub fn pathological_verdict(margins: &[f64], threshold: f64) -> PathologicalVerdict {
    let branches: Vec<usize> = margins
        .iter()
        .enumerate()
        .filter(|(_, m)| **m <= threshold)
        .map(|(k, _)| k)
        .collect();
    PathologicalVerdict {
        pathological: !branches.is_empty(),
        branches,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceResidual {
    /// Per-bus mismatch in p.u., real part active and imaginary part reactive.
    pub per_bus: Vec<Complex64>,
    /// Mean apparent-power mismatch in MVA.
    pub mean_mva: f64,
    pub max_mva: f64,
}

/// Power-balance mismatch `v^H P_n v + h_n^T p - (g_n - d_n)` and its
/// reactive analogue.
pub fn balance_residual(
    grid: &Grid,
    cs: &ConstraintSystem,
    v: &[Complex64],
    p: &[f64],
    g: &[[f64; 2]],
    d: &[[f64; 2]],
) -> BalanceResidual {
    let (hp, hq) = cs.dc.withdrawal(p);
    let per_bus: Vec<Complex64> = (0..grid.n_buses())
        .map(|n| {
            Complex64::new(
                cs.p[n].quad_form(v) + hp[n] - (g[n][0] - d[n][0]),
                cs.q[n].quad_form(v) + hq[n] - (g[n][1] - d[n][1]),
            )
        })
        .collect();
    let mva: Vec<f64> = per_bus.iter().map(|m| m.norm() * grid.base_mva).collect();
    BalanceResidual {
        mean_mva: if mva.is_empty() { 0.0 } else { mva.iter().sum::<f64>() / mva.len() as f64 },
        max_mva: mva.iter().copied().fold(0.0, f64::max),
        per_bus,
    }
}

/// Profit-optimality gap of every generator at its bus price:
/// `max_g (Λ^T g - C(g)) - (Λ^T g* - C(g*))`, zero exactly when the price
/// lies in the subdifferential of cost plus capability indicator at `g*`.
/// Gaps are relative to `1 + |Λ| (1 + |g*|)`.
pub fn lmp_subdifferential_check(sol: &SocrSolution, grid: &Grid, tol: f64) -> Result<Vec<f64>> {
    let mut gaps = Vec::with_capacity(grid.generators.len());
    for (k, gen) in grid.generators.iter().enumerate() {
        let lam = sol.lambda[gen.bus];
        let g = sol.gen_dispatch[k];
        let achieved = lam[0] * g[0] + lam[1] * g[1] - gen.cost.value(g[0]);
        let (best, _) = max_profit(lam, &gen.capability, &gen.cost);
        let scale = 1.0 + (lam[0].abs() + lam[1].abs()) * (1.0 + g[0].abs() + g[1].abs());
        let gap = (best - achieved) / scale;
        if gap > tol {
            return Err(Error::SubdifferentialViolation { gen: k, gap });
        }
        gaps.push(gap);
    }
    Ok(gaps)
}

#[derive(Debug, Clone, Serialize)]
pub struct BranchCertificate {
    pub branch: usize,
    pub from: usize,
    pub to: usize,
    pub rank_ratio: f64,
    pub margin: f64,
    pub sign_condition: bool,
    pub kappa: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PricingReport {
    pub exact: bool,
    /// Bus labels of the source data.
    pub bus_labels: Vec<usize>,
    /// Locational marginal prices in $/MWh; present only for exact solves.
    pub lmp_p: Option<Vec<f64>>,
    pub lmp_q: Option<Vec<f64>>,
    /// Power-balance duals in $/MWh, reported for every solve.
    pub dual_p: Vec<f64>,
    pub dual_q: Vec<f64>,
    pub kappa_mean: f64,
    pub kappa_max: f64,
    pub branches: Vec<BranchCertificate>,
    pub recovered_v: Vec<Complex64>,
    pub balance_residual: BalanceResidual,
    pub pathological: bool,
    pub pathological_branches: Vec<usize>,
    /// Fraction of AC branches certified by price signs alone.
    pub sign_condition_fraction: f64,
    pub objective: f64,
    pub dual_objective: f64,
    pub duality_gap: f64,
    pub psi_max: f64,
    pub dual_identity: socr::DualIdentityResiduals,
    /// Largest `trace(Λ_k Ξ_k)` relative to `max(1, max |Ψ|)`.
    pub complementarity_max: f64,
    pub subdifferential_gap_max: f64,
    pub solver: crate::conic::Residuals,
}

/// Runs every certificate on a solved relaxation and assembles the report.
pub fn certify(sol: &SocrSolution, cs: &ConstraintSystem, grid: &Grid, cfg: &PricingConfig) -> Result<PricingReport> {
    let pairs = &cs.ac_pairs;
    let ranks = rank_condition(&sol.w, pairs, cfg.exact_tol);
    let v = recover_voltages(&sol.w, grid)?;
    let kappa = relaxation_error(&sol.w, &v, pairs)?;
    let (margins, psi_max) = subspace_margins(cs, &sol.lambda, &sol.mu)?;
    let scale = psi_max.max(1.0);
    let verdict = pathological_verdict(&margins, cfg.margin_tol * scale);
    let flags = sign_condition_flags(&sol.lambda, pairs);
    lambda_k_zero_check(sol, cs, &margins, cfg.margin_tol, cfg.check_tol)?;
    let dual = check_strong_duality(sol, cs, grid, cfg.check_tol)?;
    let balance = balance_residual(grid, cs, &v, &sol.p, &sol.g, &sol.d);

    let rank_ok = ranks.iter().all(|r| r.pass);
    let exact = rank_ok && kappa.max <= cfg.exact_tol;
    let sub_gaps = if exact {
        lmp_subdifferential_check(sol, grid, cfg.check_tol)?
    } else {
        Vec::new()
    };

    let base = grid.base_mva;
    let dual_p: Vec<f64> = sol.lambda.iter().map(|l| l[0] / base).collect();
    let dual_q: Vec<f64> = sol.lambda.iter().map(|l| l[1] / base).collect();
    let branches = (0..pairs.len())
        .map(|k| BranchCertificate {
            branch: k,
            from: pairs[k].0,
            to: pairs[k].1,
            rank_ratio: ranks[k].ratio,
            margin: margins[k],
            sign_condition: flags[k],
            kappa: kappa.per_branch[k],
            complementarity: sol.complementarity[k] / scale,
        })
        .collect();
    Ok(PricingReport {
        exact,
        bus_labels: grid.buses.iter().map(|b| b.label).collect(),
        lmp_p: exact.then(|| dual_p.clone()),
        lmp_q: exact.then(|| dual_q.clone()),
        dual_p,
        dual_q,
        kappa_mean: kappa.mean,
        kappa_max: kappa.max,
        branches,
        recovered_v: v,
        balance_residual: balance,
        pathological: verdict.pathological,
        pathological_branches: verdict.branches,
        sign_condition_fraction: if flags.is_empty() {
            1.0
        } else {
            flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64
        },
        objective: sol.objective,
        dual_objective: dual,
        duality_gap: (sol.objective - dual).abs() / (1.0 + sol.objective.abs()),
        psi_max,
        dual_identity: sol.dual_identity,
        complementarity_max: sol.complementarity.iter().fold(0.0f64, |m, c| m.max(c.abs())) / scale,
        subdifferential_gap_max: sub_gaps.iter().copied().fold(0.0, f64::max),
        solver: sol.residuals,
    })
}

/// Solves the relaxation of `grid` and certifies its prices.
pub fn price(grid: &Grid, cfg: &PricingConfig) -> Result<(SocrSolution, PricingReport)> {
    let cs = ConstraintSystem::build(grid)?;
    let sol = socr::solve_socr_with(&cs, grid, cfg.solver_tol)?;
    let report = certify(&sol, &cs, grid, cfg)?;
    Ok((sol, report))
}

/// Price table rows `(bus label, lmp_p, lmp_q, |v|, angle)`; `None` for inexact solves.
pub fn lmp_table(report: &PricingReport) -> Option<Vec<(usize, f64, f64, f64, f64)>> {
    let (p, q) = (report.lmp_p.as_ref()?, report.lmp_q.as_ref()?);
    Some(
        (0..report.bus_labels.len())
            .map(|n| {
                let v = report.recovered_v[n];
                (report.bus_labels[n], p[n], q[n], v.norm(), v.arg())
            })
            .collect(),
    )
}
