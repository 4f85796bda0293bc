//! Hermitian constraint matrices of the grid model and the dual maps built
//! from them.
//!
//! Every quantity of the power-flow model is a quadratic form `v^H A v` of
//! the complex bus voltages plus a linear term in the DC variables. With the
//! Gram matrix `V = v v^H` the forms become `trace(A V)`.

use num_complex::Complex64;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::hermitian::SparseHermitian;

/// Bus admittance matrix together with the four π-model terms of each branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Admittance {
    pub n: usize,
    entries: BTreeMap<(usize, usize), Complex64>,
    /// `[Yff, Yft, Ytf, Ytt]` per AC branch.
    pub branch: Vec<[Complex64; 4]>,
}

impl Admittance {
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.entries.get(&(i, j)).copied().unwrap_or_default()
    }

    /// Nonzero entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        self.entries.range((i, 0)..(i + 1, 0)).map(|((_, j), v)| (*j, *v))
    }

    /// `Y v`.
    pub fn mul(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); self.n];
        for (&(i, j), y) in &self.entries {
            out[i] += y * v[j];
        }
        out
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<Complex64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for (&(i, j), &v) in &self.entries {
            m[(i, j)] = v;
        }
        m
    }
}

pub fn build_admittance(grid: &Grid) -> Result<Admittance> {
    let n = grid.n_buses();
    let mut entries: BTreeMap<(usize, usize), Complex64> = BTreeMap::new();
    let mut branch = Vec::with_capacity(grid.ac_branches.len());
    for (k, br) in grid.ac_branches.iter().enumerate() {
        let z = Complex64::new(br.series_r, br.series_x);
        if z.norm() == 0.0 {
            return Err(Error::ZeroImpedanceBranch(k));
        }
        let ys = z.inv();
        let charging = Complex64::new(0.0, br.shunt_b / 2.0);
        let t = Complex64::from_polar(br.tap, br.shift);
        let yff = (ys + charging) / (br.tap * br.tap);
        let yft = -ys / t.conj();
        let ytf = -ys / t;
        let ytt = ys + charging;
        let (i, j) = (br.from, br.to);
        *entries.entry((i, i)).or_default() += yff;
        *entries.entry((i, j)).or_default() += yft;
        *entries.entry((j, i)).or_default() += ytf;
        *entries.entry((j, j)).or_default() += ytt;
        branch.push([yff, yft, ytf, ytt]);
    }
    for (i, bus) in grid.buses.iter().enumerate() {
        if bus.g_shunt != 0.0 || bus.b_shunt != 0.0 {
            *entries.entry((i, i)).or_default() += Complex64::new(bus.g_shunt, bus.b_shunt);
        }
    }
    Ok(Admittance { n, entries, branch })
}

/// `P_n = (Y^H M_n + M_n Y) / 2` and `Q_n = (Y^H M_n - M_n Y) / (2i)`, so that
/// `v^H P_n v + i v^H Q_n v = v_n conj((Y v)_n)` is the power injected at bus `n`.
pub fn build_injection_matrices(y: &Admittance) -> (Vec<SparseHermitian>, Vec<SparseHermitian>) {
    let i_half = Complex64::new(0.0, 0.5);
    (0..y.n)
        .map(|n| {
            let mut p = SparseHermitian::new(y.n);
            let mut q = SparseHermitian::new(y.n);
            for (j, ynj) in y.row(n) {
                if j == n {
                    p.add_real(n, n, ynj.re);
                    q.add_real(n, n, -ynj.im);
                } else {
                    p.add(n, j, ynj * 0.5);
                    q.add(n, j, ynj * i_half);
                }
            }
            (p, q)
        })
        .unzip()
}

/// Matrices of the per-branch constraints `v^H A v <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchMatrices {
    /// `|I_from|^2` and `|I_to|^2`.
    pub i_out: SparseHermitian,
    pub i_in: SparseHermitian,
    /// `|v_to|^2 - (1 - drop_lo)^2 |v_from|^2 <= 0`.
    pub m_lo: SparseHermitian,
    /// `(1 - drop_hi)^2 |v_from|^2 - |v_to|^2 <= 0`.
    pub m_hi: SparseHermitian,
    /// `-Re(v_from conj(v_to)) <= 0`.
    pub a_center: SparseHermitian,
    /// `tan(ang_lo) Re(..) - Im(..) <= 0`.
    pub a_lo: SparseHermitian,
    /// `Im(..) - tan(ang_hi) Re(..) <= 0`.
    pub a_hi: SparseHermitian,
}

fn outer(n: usize, i: usize, j: usize, yi: Complex64, yj: Complex64) -> SparseHermitian {
    let mut m = SparseHermitian::new(n);
    m.add_real(i, i, yi.norm_sqr());
    m.add_real(j, j, yj.norm_sqr());
    m.add(i, j, yi * yj.conj());
    m
}

pub fn build_branch_matrices(grid: &Grid, y: &Admittance) -> Result<Vec<BranchMatrices>> {
    let n = grid.n_buses();
    let half_pi = std::f64::consts::FRAC_PI_2;
    grid.ac_branches
        .iter()
        .enumerate()
        .map(|(k, br)| {
            if br.ang_lo.abs() >= half_pi || br.ang_hi.abs() >= half_pi {
                return Err(Error::AngleRangeOutOfDomain(k));
            }
            let (i, j) = (br.from, br.to);
            let [yff, yft, ytf, ytt] = y.branch[k];

            let hi = (1.0 - br.drop_hi).max(0.0).powi(2);
            let lo = (1.0 - br.drop_lo).max(0.0).powi(2);
            let mut m_hi = SparseHermitian::new(n);
            m_hi.add_real(i, i, hi);
            m_hi.add_real(j, j, -1.0);
            let mut m_lo = SparseHermitian::new(n);
            m_lo.add_real(j, j, 1.0);
            m_lo.add_real(i, i, -lo);

            // v^H R v = Re(v_i conj(v_j)), v^H S v = Im(v_i conj(v_j))
            let mut r = SparseHermitian::new(n);
            r.add_real(i, j, 0.5);
            let mut s = SparseHermitian::new(n);
            s.add(i, j, Complex64::new(0.0, 0.5));

            let mut a_hi = s.clone();
            a_hi.add_scaled(&r, -br.ang_hi.tan());
            let mut a_lo = r.scaled(br.ang_lo.tan());
            a_lo.add_scaled(&s, -1.0);

            Ok(BranchMatrices {
                i_out: outer(n, i, j, yff.conj(), yft.conj()),
                i_in: outer(n, i, j, ytf.conj(), ytt.conj()),
                m_lo,
                m_hi,
                a_center: r.scaled(-1.0),
                a_lo,
                a_hi,
            })
        })
        .collect()
}

/// Layout of the DC-side variables: per DC branch `d`, the forward flow
/// `p+`, the reverse flow `p-`, and converter reactive injections at both
/// terminals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DcMaps {
    pub n_vars: usize,
    /// Active withdrawal from each bus into the DC network, `h_n^T p`.
    pub h_p: Vec<Vec<(usize, f64)>>,
    /// Reactive withdrawal from each bus by the converters.
    pub h_q: Vec<Vec<(usize, f64)>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub const DC_VARS_PER_BRANCH: usize = 4;

impl DcMaps {
    pub fn p_plus(d: usize) -> usize {
        DC_VARS_PER_BRANCH * d
    }

    pub fn p_minus(d: usize) -> usize {
        DC_VARS_PER_BRANCH * d + 1
    }

    pub fn q_from(d: usize) -> usize {
        DC_VARS_PER_BRANCH * d + 2
    }

    pub fn q_to(d: usize) -> usize {
        DC_VARS_PER_BRANCH * d + 3
    }

    /// Net active injection into each bus from the DC network.
    pub fn active_injection(&self, p: &[f64]) -> Vec<f64> {
        self.h_p.iter().map(|h| -h.iter().map(|(v, c)| c * p[*v]).sum::<f64>()).collect()
    }

    pub fn withdrawal(&self, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let dot = |h: &Vec<(usize, f64)>| h.iter().map(|(v, c)| c * p[*v]).sum::<f64>();
        (self.h_p.iter().map(dot).collect(), self.h_q.iter().map(dot).collect())
    }
}

pub fn build_dc_maps(grid: &Grid) -> DcMaps {
    let n = grid.n_buses();
    let nv = DC_VARS_PER_BRANCH * grid.dc_branches.len();
    let mut h_p = vec![Vec::new(); n];
    let mut h_q = vec![Vec::new(); n];
    let mut lower = vec![0.0; nv];
    let mut upper = vec![0.0; nv];
    for (d, br) in grid.dc_branches.iter().enumerate() {
        let eta = 1.0 - br.loss_factor;
        let (pp, pm, qf, qt) = (DcMaps::p_plus(d), DcMaps::p_minus(d), DcMaps::q_from(d), DcMaps::q_to(d));
        h_p[br.from].push((pp, 1.0));
        h_p[br.from].push((pm, -eta));
        h_p[br.to].push((pp, -eta));
        h_p[br.to].push((pm, 1.0));
        h_q[br.from].push((qf, -1.0));
        h_q[br.to].push((qt, -1.0));
        lower[pp] = br.p_min.max(0.0);
        upper[pp] = br.p_max.max(0.0);
        lower[pm] = (-br.p_max).max(0.0);
        upper[pm] = (-br.p_min).max(0.0);
        lower[qf] = -br.q_capability;
        upper[qf] = br.q_capability;
        lower[qt] = -br.q_capability;
        upper[qt] = br.q_capability;
    }
    DcMaps {
        n_vars: nv,
        h_p,
        h_q,
        lower,
        upper,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    VoltageLo,
    VoltageHi,
    CurrentFrom,
    CurrentTo,
    DropLo,
    DropHi,
    AngleCenter,
    AngleLo,
    AngleHi,
    DcLo,
    DcHi,
}

/// One stacked inequality `trace(C V) + c^T p <= b`. `element` is the bus,
/// AC branch or DC variable the row belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub kind: RowKind,
    pub element: usize,
    pub c: SparseHermitian,
    pub dc: Vec<(usize, f64)>,
    pub b: f64,
}

impl Row {
    /// Left-hand side for an entrywise Gram matrix and DC variables.
    pub fn lhs(&self, w: impl Fn(usize, usize) -> Complex64, p: &[f64]) -> f64 {
        self.c.trace_with(w) + self.dc.iter().map(|(v, k)| k * p[*v]).sum::<f64>()
    }
}

fn voltage_matrix(n: usize, bus: usize, sign: f64) -> SparseHermitian {
    let mut m = SparseHermitian::new(n);
    m.add_real(bus, bus, sign);
    m
}

/// Stacks all inequalities in the fixed order: voltage lower and upper bounds
/// per bus, source and destination currents, drop lower and upper bounds,
/// angle center, lower and upper bounds per AC branch, then lower and upper
/// bounds per DC variable. Each group is listed over all of its elements
/// before the next group begins.
pub fn stack_inequalities(grid: &Grid, branch: &[BranchMatrices], dc: &DcMaps) -> Vec<Row> {
    let n = grid.n_buses();
    let mut rows = Vec::new();
    let hermitian_row = |kind, element, c: SparseHermitian, b| Row {
        kind,
        element,
        c,
        dc: Vec::new(),
        b,
    };
    for (i, bus) in grid.buses.iter().enumerate() {
        rows.push(hermitian_row(RowKind::VoltageLo, i, voltage_matrix(n, i, -1.0), -bus.v_min * bus.v_min));
    }
    for (i, bus) in grid.buses.iter().enumerate() {
        rows.push(hermitian_row(RowKind::VoltageHi, i, voltage_matrix(n, i, 1.0), bus.v_max * bus.v_max));
    }
    let bounds: Vec<(f64, f64)> = grid.ac_branches.iter().map(|b| b.current_bounds()).collect();
    type Pick = fn(&BranchMatrices) -> &SparseHermitian;
    let groups: [(RowKind, Pick); 7] = [
        (RowKind::CurrentFrom, |m| &m.i_out),
        (RowKind::CurrentTo, |m| &m.i_in),
        (RowKind::DropLo, |m| &m.m_lo),
        (RowKind::DropHi, |m| &m.m_hi),
        (RowKind::AngleCenter, |m| &m.a_center),
        (RowKind::AngleLo, |m| &m.a_lo),
        (RowKind::AngleHi, |m| &m.a_hi),
    ];
    for (kind, pick) in groups {
        for (k, m) in branch.iter().enumerate() {
            let b = match kind {
                RowKind::CurrentFrom => bounds[k].0.powi(2),
                RowKind::CurrentTo => bounds[k].1.powi(2),
                _ => 0.0,
            };
            rows.push(hermitian_row(kind, k, pick(m).clone(), b));
        }
    }
    for v in 0..dc.n_vars {
        rows.push(Row {
            kind: RowKind::DcLo,
            element: v,
            c: SparseHermitian::new(n),
            dc: vec![(v, -1.0)],
            b: -dc.lower[v],
        });
    }
    for v in 0..dc.n_vars {
        rows.push(Row {
            kind: RowKind::DcHi,
            element: v,
            c: SparseHermitian::new(n),
            dc: vec![(v, 1.0)],
            b: dc.upper[v],
        });
    }
    rows
}

/// Every matrix and map of the grid model.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub n: usize,
    pub y: Admittance,
    pub p: Vec<SparseHermitian>,
    pub q: Vec<SparseHermitian>,
    pub branch: Vec<BranchMatrices>,
    /// `(from, to)` per AC branch.
    pub ac_pairs: Vec<(usize, usize)>,
    pub dc: DcMaps,
    pub rows: Vec<Row>,
}

impl ConstraintSystem {
    pub fn build(grid: &Grid) -> Result<Self> {
        let y = build_admittance(grid)?;
        let (p, q) = build_injection_matrices(&y);
        let branch = build_branch_matrices(grid, &y)?;
        let dc = build_dc_maps(grid);
        let rows = stack_inequalities(grid, &branch, &dc);
        Ok(ConstraintSystem {
            n: grid.n_buses(),
            ac_pairs: grid.ac_branches.iter().map(|b| (b.from, b.to)).collect(),
            y,
            p,
            q,
            branch,
            dc,
            rows,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Expected row count `2 N + 7 E + 2 * (DC variables)`.
    pub fn expected_rows(n: usize, e: usize, d: usize) -> usize {
        2 * n + 7 * e + 2 * DC_VARS_PER_BRANCH * d
    }

    /// `Ψ(Λ, μ) = Σ_n (Λ_n1 P_n + Λ_n2 Q_n) + Σ_m μ_m C_m`.
    pub fn assemble_psi(&self, lambda: &[[f64; 2]], mu: &[f64]) -> Result<SparseHermitian> {
        self.check_dims(lambda, mu)?;
        let mut psi = SparseHermitian::new(self.n);
        for (n, l) in lambda.iter().enumerate() {
            if l[0] != 0.0 {
                psi.add_scaled(&self.p[n], l[0]);
            }
            if l[1] != 0.0 {
                psi.add_scaled(&self.q[n], l[1]);
            }
        }
        for (row, &m) in self.rows.iter().zip(mu) {
            if m != 0.0 {
                psi.add_scaled(&row.c, m);
            }
        }
        Ok(psi)
    }

    /// `ψ(Λ, μ) = Σ_n (Λ_n1 h^P_n + Λ_n2 h^Q_n) + Σ_m μ_m c_m`.
    pub fn assemble_psi_vec(&self, lambda: &[[f64; 2]], mu: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(lambda, mu)?;
        let mut out = vec![0.0; self.dc.n_vars];
        for (n, l) in lambda.iter().enumerate() {
            for &(v, c) in &self.dc.h_p[n] {
                out[v] += l[0] * c;
            }
            for &(v, c) in &self.dc.h_q[n] {
                out[v] += l[1] * c;
            }
        }
        for (row, &m) in self.rows.iter().zip(mu) {
            for &(v, c) in &row.dc {
                out[v] += m * c;
            }
        }
        Ok(out)
    }

    fn check_dims(&self, lambda: &[[f64; 2]], mu: &[f64]) -> Result<()> {
        if lambda.len() != self.n || mu.len() != self.rows.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} bus prices and {} row multipliers, got {} and {}",
                self.n,
                self.rows.len(),
                lambda.len(),
                mu.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AcBranch, Bus, DcBranch, Grid};

    fn grid_with(branches: Vec<AcBranch>, n: usize) -> Grid {
        Grid {
            name: String::new(),
            base_mva: 100.0,
            buses: (0..n)
                .map(|i| Bus {
                    label: i + 1,
                    v_min: 0.9,
                    v_max: 1.1,
                    g_shunt: 0.0,
                    b_shunt: 0.0,
                })
                .collect(),
            reference_bus: 0,
            ac_branches: branches,
            dc_branches: vec![],
            generators: vec![],
            loads: vec![],
        }
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn pure_reactance_admittance() {
        let g = grid_with(vec![AcBranch::line(0, 1, 0.0, 0.1, 0.0)], 2);
        let y = build_admittance(&g).unwrap();
        assert!((y.get(0, 0) - c(0.0, -10.0)).norm() < 1e-12);
        assert!((y.get(0, 1) - c(0.0, 10.0)).norm() < 1e-12);
        assert!((y.get(1, 1) - c(0.0, -10.0)).norm() < 1e-12);
    }

    #[test]
    fn tapped_admittance() {
        let mut br = AcBranch::line(0, 1, 0.0, 0.1, 0.0);
        br.tap = 2.0;
        let y = build_admittance(&grid_with(vec![br], 2)).unwrap();
        assert!((y.get(0, 0) - c(0.0, -2.5)).norm() < 1e-12);
        assert!((y.get(0, 1) - c(0.0, 5.0)).norm() < 1e-12);
        assert!((y.get(1, 0) - c(0.0, 5.0)).norm() < 1e-12);
        assert!((y.get(1, 1) - c(0.0, -10.0)).norm() < 1e-12);
    }

    #[test]
    fn zero_impedance_rejected() {
        let g = grid_with(vec![AcBranch::line(0, 1, 0.0, 0.0, 0.0)], 2);
        assert_eq!(build_admittance(&g), Err(Error::ZeroImpedanceBranch(0)));
    }

    #[test]
    fn flat_profile_lossless_injection_is_zero() {
        let g = grid_with(vec![AcBranch::line(0, 1, 0.0, 0.1, 0.0)], 2);
        let cs = ConstraintSystem::build(&g).unwrap();
        let v = [c(1.0, 0.0); 2];
        assert!(cs.p[0].quad_form(&v).abs() < 1e-12);
        assert!(cs.p[1].quad_form(&v).abs() < 1e-12);
    }

    #[test]
    fn angle_and_drop_boundaries() {
        let mut br = AcBranch::line(0, 1, 0.01, 0.1, 0.0);
        br.ang_hi = 0.1;
        br.drop_hi = 0.1;
        let g = grid_with(vec![br], 2);
        let cs = ConstraintSystem::build(&g).unwrap();
        let m = &cs.branch[0];
        assert!(m.a_hi.quad_form(&[c(1.0, 0.0), c(1.0, 0.0)]) < 0.0);
        let v = [c(1.0, 0.0), Complex64::from_polar(1.0, -0.1)];
        assert!(m.a_hi.quad_form(&v).abs() < 1e-14);
        assert!(m.a_lo.quad_form(&v) < 0.0);
        let v = [c(1.0, 0.0), c(0.9, 0.0)];
        assert!(m.m_hi.quad_form(&v).abs() < 1e-14);
    }

    #[test]
    fn row_count_and_voltage_row() {
        let g = grid_with(vec![AcBranch::line(0, 1, 0.01, 0.1, 0.0)], 2);
        let cs = ConstraintSystem::build(&g).unwrap();
        assert_eq!(cs.n_rows(), 11);
        let v = [c(1.0, 0.0); 2];
        let row = &cs.rows[2];
        assert_eq!(row.kind, RowKind::VoltageHi);
        let lhs = row.lhs(|i, j| v[i] * v[j].conj(), &[]);
        assert!((row.b - lhs - 0.21).abs() < 1e-12);
    }

    #[test]
    fn dc_loss_model() {
        let mut g = grid_with(vec![AcBranch::line(0, 1, 0.01, 0.1, 0.0)], 2);
        g.dc_branches.push(DcBranch {
            from: 0,
            to: 1,
            p_min: -1.0,
            p_max: 1.0,
            loss_factor: 0.035,
            q_capability: 0.25,
        });
        let dc = build_dc_maps(&g);
        let inj = dc.active_injection(&[1.0, 0.0, 0.0, 0.0]);
        assert!((inj[0] + 1.0).abs() < 1e-15 && (inj[1] - 0.965).abs() < 1e-15);
        let inj = dc.active_injection(&[0.0, 0.5, 0.0, 0.0]);
        assert!((inj[0] - 0.4825).abs() < 1e-15 && (inj[1] + 0.5).abs() < 1e-15);
        assert_eq!(dc.active_injection(&[0.0; 4]), vec![0.0, 0.0]);
        let cs = ConstraintSystem::build(&g).unwrap();
        assert_eq!(cs.n_rows(), ConstraintSystem::expected_rows(2, 1, 1));
    }

    #[test]
    fn psi_linearity() {
        let g = grid_with(
            vec![AcBranch::line(0, 1, 0.01, 0.1, 0.02), AcBranch::line(1, 2, 0.02, 0.2, 0.0)],
            3,
        );
        let cs = ConstraintSystem::build(&g).unwrap();
        let zero_mu = vec![0.0; cs.n_rows()];
        assert!(cs.assemble_psi(&[[0.0; 2]; 3], &zero_mu).unwrap().is_zero(0.0));
        let lam = [[1.0, -0.5], [2.0, 0.3], [0.7, 0.1]];
        let lam2: Vec<[f64; 2]> = lam.iter().map(|l| [2.0 * l[0], 2.0 * l[1]]).collect();
        let a = cs.assemble_psi(&lam, &zero_mu).unwrap();
        let b = cs.assemble_psi(&lam2, &zero_mu).unwrap();
        let mut diff = a.scaled(2.0);
        diff.add_scaled(&b, -1.0);
        assert!(diff.is_zero(1e-12));
        let mut mu = zero_mu.clone();
        mu[1] = 1.0; // lower voltage bound of bus 1
        let psi = cs.assemble_psi(&[[0.0; 2]; 3], &mu).unwrap();
        assert_eq!(psi.get(1, 1).re, -1.0);
        assert!(cs.assemble_psi(&lam[..2], &mu).is_err());
    }
}
