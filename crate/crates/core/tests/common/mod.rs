//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use gridlmp::casefile::{parse_matpower, to_grid};
use gridlmp::conic::{self, Affine, ConeKind, ConicProgram, Status};
use gridlmp::grid::enforce_min_resistance;
use gridlmp::matrices::ConstraintSystem;
use gridlmp::{AcBranch, BenefitFn, Bus, Capability, CostFn, DcBranch, GenSpec, Grid, LoadRegion, LoadSpec};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WSCC9: &str = include_str!("../../../../data/wscc9.m");

/// Nine-bus loop with lossless transformers given a small resistance.
pub fn wscc9() -> Grid {
    let grid = to_grid(&parse_matpower(WSCC9).unwrap()).unwrap();
    enforce_min_resistance(&grid, 1e-5).0
}

pub fn bus(label: usize, v_min: f64, v_max: f64) -> Bus {
    Bus {
        label,
        v_min,
        v_max,
        g_shunt: 0.0,
        b_shunt: 0.0,
    }
}

pub fn gen(bus: usize, p: (f64, f64), q: (f64, f64), c2: f64, c1: f64) -> GenSpec {
    GenSpec {
        bus,
        capability: Capability::Box {
            p_min: p.0,
            p_max: p.1,
            q_min: q.0,
            q_max: q.1,
        },
        cost: CostFn::Quadratic { c2, c1, c0: 0.0 },
    }
}

pub fn fixed_load(bus: usize, p: f64, q: f64) -> LoadSpec {
    LoadSpec {
        bus,
        region: LoadRegion::Fixed { p, q },
        benefit: BenefitFn::Zero,
    }
}

/// Flexible load with a linear benefit `slope * P` on `[p_min, p_max]`.
pub fn flexible_load(bus: usize, p: (f64, f64), q: (f64, f64), slope: f64) -> LoadSpec {
    LoadSpec {
        bus,
        region: LoadRegion::Box {
            p_min: p.0,
            p_max: p.1,
            q_min: q.0,
            q_max: q.1,
        },
        benefit: BenefitFn::PiecewiseLinear {
            points: vec![[p.0, slope * p.0], [p.1, slope * p.1]],
        },
    }
}

pub fn dc_line(from: usize, to: usize, cap: f64, loss: f64, q: f64) -> DcBranch {
    DcBranch {
        from,
        to,
        p_min: -cap,
        p_max: cap,
        loss_factor: loss,
        q_capability: q,
    }
}

pub fn grid(name: &str, buses: Vec<Bus>, ac: Vec<AcBranch>, dc: Vec<DcBranch>, gens: Vec<GenSpec>, loads: Vec<LoadSpec>) -> Grid {
    Grid {
        name: name.into(),
        base_mva: 100.0,
        buses,
        reference_bus: 0,
        ac_branches: ac,
        dc_branches: dc,
        generators: gens,
        loads,
    }
}

// ---------------------------------------------------------------------------
// Direct electrical computation from the π-model of each branch.

/// Terminal currents `(I_from, I_to)` flowing into the branch. The `from`
/// side has an ideal transformer `t : 1` ahead of the series element.
pub fn branch_currents(br: &AcBranch, vf: Complex64, vt: Complex64) -> (Complex64, Complex64) {
    let t = Complex64::from_polar(br.tap, br.shift);
    let ys = Complex64::new(br.series_r, br.series_x).inv();
    let half_b = Complex64::new(0.0, br.shunt_b / 2.0);
    let inner = vf / t;
    let series = ys * (inner - vt);
    let i_from = (series + half_b * inner) / t.conj();
    let i_to = -series + half_b * vt;
    (i_from, i_to)
}

/// Complex power leaving every bus into the AC network and bus shunts.
pub fn bus_injections(grid: &Grid, v: &[Complex64]) -> Vec<Complex64> {
    let mut s: Vec<Complex64> = grid
        .buses
        .iter()
        .zip(v)
        .map(|(b, vn)| vn * (Complex64::new(b.g_shunt, b.b_shunt) * vn).conj())
        .collect();
    for br in &grid.ac_branches {
        let (i_f, i_t) = branch_currents(br, v[br.from], v[br.to]);
        s[br.from] += v[br.from] * i_f.conj();
        s[br.to] += v[br.to] * i_t.conj();
    }
    s
}

/// Largest violation of the voltage and AC-branch limits at `v`, relative
/// to each limit's magnitude. Nonpositive when all limits hold.
pub fn voltage_violation(grid: &Grid, v: &[Complex64]) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for (b, vn) in grid.buses.iter().zip(v) {
        worst = worst.max(b.v_min - vn.norm()).max(vn.norm() - b.v_max);
    }
    for br in &grid.ac_branches {
        let (vf, vt) = (v[br.from], v[br.to]);
        let (i_f, i_t) = branch_currents(br, vf, vt);
        let (cf, ct) = br.current_bounds();
        worst = worst.max((i_f.norm() - cf) / cf).max((i_t.norm() - ct) / ct);
        let drop = 1.0 - vt.norm() / vf.norm();
        worst = worst.max(br.drop_lo - drop).max(drop - br.drop_hi);
        let angle = (vf * vt.conj()).arg();
        worst = worst.max(br.ang_lo - angle).max(angle - br.ang_hi);
    }
    worst
}

// ---------------------------------------------------------------------------
// Grid-search oracle for tiny hybrid instances.
//
// Supported instances: one generator with a box region and quadratic cost at
// every bus, optional fixed or flexible (linear benefit) loads, at most one
// bidirectional DC branch. Voltages are searched on a lattice of 1e-3 in
// magnitude and 1e-3 rad in angle; for each lattice point the dispatch and
// DC flow are optimized exactly.

pub const LATTICE: f64 = 1e-3;

#[derive(Debug, Clone)]
struct BusDevices {
    p_min: f64,
    p_max: f64,
    q_min: f64,
    q_max: f64,
    c2: f64,
    c1: f64,
    c0: f64,
    /// Total fixed (p, q) demand.
    fixed: (f64, f64),
    /// Flexible demand `(p_min, p_max, q_min, q_max, slope)`.
    flex: Option<(f64, f64, f64, f64, f64)>,
    /// Reactive range added by a converter at this bus.
    q_conv: f64,
}

impl BusDevices {
    /// Feasible range of the active net injection `g - d`.
    fn p_domain(&self) -> (f64, f64) {
        match self.flex {
            Some((dl, dh, ..)) => (self.p_min - self.fixed.0 - dh, self.p_max - self.fixed.0 - dl),
            None => (self.p_min - self.fixed.0, self.p_max - self.fixed.0),
        }
    }

    fn q_feasible(&self, x: f64) -> bool {
        let (ql, qh) = match self.flex {
            Some((_, _, ql, qh, _)) => (ql, qh),
            None => (0.0, 0.0),
        };
        let lo = self.q_min - self.fixed.1 - qh - self.q_conv;
        let hi = self.q_max - self.fixed.1 - ql + self.q_conv;
        x >= lo && x <= hi
    }

    fn cost(&self, g: f64) -> f64 {
        self.c2 * g * g + self.c1 * g + self.c0
    }

    /// Best welfare and generator output for active net injection `x`.
    fn value(&self, x: f64) -> Option<(f64, f64)> {
        let (lo, hi) = self.p_domain();
        let slack = 1e-12 * (1.0 + x.abs());
        if x < lo - slack || x > hi + slack {
            return None;
        }
        match self.flex {
            None => {
                let g = (x + self.fixed.0).clamp(self.p_min, self.p_max);
                Some((-self.cost(g), g))
            }
            Some((dl, dh, _, _, slope)) => {
                // flexible demand d with g = x + fixed + d
                let d_lo = dl.max(self.p_min - x - self.fixed.0);
                let d_hi = dh.min(self.p_max - x - self.fixed.0).max(d_lo);
                let d = if self.c2 > 0.0 {
                    ((slope - self.c1) / (2.0 * self.c2) - x - self.fixed.0).clamp(d_lo, d_hi)
                } else if slope > self.c1 {
                    d_hi
                } else {
                    d_lo
                };
                let g = x + self.fixed.0 + d;
                Some((slope * d - self.cost(g), g))
            }
        }
    }
}

fn bus_devices(grid: &Grid) -> Vec<BusDevices> {
    let n = grid.n_buses();
    let mut out: Vec<Option<BusDevices>> = vec![None; n];
    for g in &grid.generators {
        let Capability::Box {
            p_min,
            p_max,
            q_min,
            q_max,
        } = g.capability
        else {
            panic!("oracle supports box regions only")
        };
        let CostFn::Quadratic { c2, c1, c0 } = g.cost else {
            panic!("oracle supports quadratic costs only")
        };
        assert!(out[g.bus].is_none(), "oracle supports one generator per bus");
        out[g.bus] = Some(BusDevices {
            p_min,
            p_max,
            q_min,
            q_max,
            c2,
            c1,
            c0,
            fixed: (0.0, 0.0),
            flex: None,
            q_conv: 0.0,
        });
    }
    let mut out: Vec<BusDevices> = out
        .into_iter()
        .map(|b| b.expect("oracle needs a generator at every bus"))
        .collect();
    for l in &grid.loads {
        let b = &mut out[l.bus];
        match (&l.region, &l.benefit) {
            (LoadRegion::Fixed { p, q }, BenefitFn::Zero) => {
                b.fixed.0 += p;
                b.fixed.1 += q;
            }
            (
                LoadRegion::Box {
                    p_min,
                    p_max,
                    q_min,
                    q_max,
                },
                BenefitFn::PiecewiseLinear { points },
            ) => {
                assert!(b.flex.is_none() && points.len() == 2);
                let slope = (points[1][1] - points[0][1]) / (points[1][0] - points[0][0]);
                b.flex = Some((*p_min, *p_max, *q_min, *q_max, slope));
            }
            _ => panic!("unsupported load in oracle"),
        }
    }
    assert!(grid.dc_branches.len() <= 1, "oracle supports one DC branch");
    for d in &grid.dc_branches {
        assert!(d.p_min <= 0.0 && d.p_max >= 0.0);
        out[d.from].q_conv += d.q_capability;
        out[d.to].q_conv += d.q_capability;
    }
    out
}

/// Maximizes a concave function on `[a, b]` by golden-section search.
fn golden(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (a, b);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Best welfare at fixed voltages: `(welfare, generator outputs)`.
fn welfare_at(grid: &Grid, devs: &[BusDevices], v: &[Complex64], check_limits: bool) -> Option<(f64, Vec<f64>)> {
    if check_limits && voltage_violation(grid, v) > 0.0 {
        return None;
    }
    let s = bus_injections(grid, v);
    for (d, sn) in devs.iter().zip(&s) {
        if !d.q_feasible(sn.im) {
            return None;
        }
    }
    let total = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let mut w = 0.0;
        let mut g = Vec::with_capacity(x.len());
        for (d, xn) in devs.iter().zip(x) {
            let (val, gn) = d.value(*xn)?;
            w += val;
            g.push(gn);
        }
        Some((w, g))
    };
    let base: Vec<f64> = s.iter().map(|x| x.re).collect();
    let Some(dc) = grid.dc_branches.first() else {
        return total(&base);
    };
    let eta = 1.0 - dc.loss_factor;
    let (f, t) = (dc.from, dc.to);
    let mut best: Option<(f64, Vec<f64>)> = None;
    // forward flow a >= 0: from withdraws a, to receives eta a; reverse is symmetric
    for (src, dst, cap) in [(f, t, dc.p_max), (t, f, -dc.p_min)] {
        let (src_lo, src_hi) = devs[src].p_domain();
        let (dst_lo, dst_hi) = devs[dst].p_domain();
        // x_src = base_src + a in src domain, x_dst = base_dst - eta a in dst domain
        let lo = 0f64.max(src_lo - base[src]).max((base[dst] - dst_hi) / eta);
        let hi = cap.min(src_hi - base[src]).min((base[dst] - dst_lo) / eta);
        if lo > hi {
            continue;
        }
        let at = |a: f64| {
            let mut x = base.clone();
            x[src] += a;
            x[dst] -= eta * a;
            total(&x)
        };
        let a = golden(lo, hi, |a| at(a).map_or(f64::NEG_INFINITY, |r| r.0));
        for cand in [a, lo, hi] {
            if let Some(r) = at(cand) {
                if best.as_ref().map_or(true, |b| r.0 > b.0) {
                    best = Some(r);
                }
            }
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub welfare: f64,
    pub v: Vec<Complex64>,
    pub dispatch: Vec<f64>,
    /// Estimated welfare change across one lattice cell around the optimum.
    pub welfare_bound: f64,
    /// Estimated change of any generator output across one lattice cell.
    pub dispatch_bound: f64,
}

/// Lattice coordinates: magnitude indices for every bus, then angle
/// indices for every non-reference bus.
fn lattice_voltages(grid: &Grid, x: &[i64]) -> Vec<Complex64> {
    let n = grid.n_buses();
    let mut k = n;
    (0..n)
        .map(|i| {
            let mag = grid.buses[i].v_min + x[i] as f64 * LATTICE;
            let ang = if i == grid.reference_bus {
                0.0
            } else {
                k += 1;
                x[k - 1] as f64 * LATTICE
            };
            Complex64::from_polar(mag, ang)
        })
        .collect()
}

fn lattice_ranges(grid: &Grid, angle_window: f64) -> Vec<(i64, i64)> {
    let n = grid.n_buses();
    let mut r: Vec<(i64, i64)> = grid
        .buses
        .iter()
        .map(|b| (0, ((b.v_max - b.v_min) / LATTICE).round() as i64))
        .collect();
    let a = (angle_window / LATTICE).round() as i64;
    r.extend(std::iter::repeat((-a, a)).take(n - 1));
    r
}

/// Visits every lattice point `center + step * k`, `|k_d| <= reach[d]`, inside `ranges`.
fn scan(ranges: &[(i64, i64)], center: &[i64], step: i64, reach: &[i64], mut visit: impl FnMut(&[i64])) {
    let dim = ranges.len();
    let mut k: Vec<i64> = reach.iter().map(|r| -r).collect();
    let mut x = vec![0i64; dim];
    'outer: loop {
        let mut inside = true;
        for d in 0..dim {
            x[d] = center[d] + step * k[d];
            if x[d] < ranges[d].0 || x[d] > ranges[d].1 {
                inside = false;
            }
        }
        if inside {
            visit(&x);
        }
        for d in 0..dim {
            if k[d] < reach[d] {
                k[d] += 1;
                continue 'outer;
            }
            k[d] = -reach[d];
        }
        break;
    }
}

/// Grid search for the welfare-maximizing voltages of a tiny instance.
pub fn brute_force(grid: &Grid, angle_window: f64) -> OracleResult {
    let devs = bus_devices(grid);
    let ranges = lattice_ranges(grid, angle_window);
    let dim = ranges.len();
    let eval = |x: &[i64]| welfare_at(grid, &devs, &lattice_voltages(grid, x), true);

    // coarse pass over the whole box, keeping several starting points
    let coarse = 20;
    let origin: Vec<i64> = ranges.iter().map(|r| (r.0 + r.1) / 2).collect();
    let reach: Vec<i64> = ranges.iter().map(|r| (r.1 - r.0) / (2 * coarse) + 1).collect();
    let mut starts: Vec<(f64, Vec<i64>)> = Vec::new();
    scan(&ranges, &origin, coarse, &reach, |x| {
        if let Some((w, _)) = eval(x) {
            starts.push((w, x.to_vec()));
        }
    });
    assert!(!starts.is_empty(), "no feasible coarse lattice point");
    starts.sort_by(|a, b| b.0.total_cmp(&a.0));
    starts.truncate(4);

    let mut best: Option<(f64, Vec<i64>)> = None;
    for (_, start) in starts {
        let mut center = start;
        for (step, reach) in [(5, 4), (1, 5)] {
            let mut local = (f64::NEG_INFINITY, center.clone());
            // repeat until the best point is interior to the window
            loop {
                let c = local.1.clone();
                scan(&ranges, &c, step, &vec![reach; dim], |x| {
                    if let Some((w, _)) = eval(x) {
                        if w > local.0 {
                            local = (w, x.to_vec());
                        }
                    }
                });
                let edge = (0..dim).any(|d| {
                    let off = (local.1[d] - c[d]) / step;
                    off.abs() == reach && local.1[d] > ranges[d].0 && local.1[d] < ranges[d].1
                });
                if !edge {
                    break;
                }
            }
            center = local.1;
        }
        let w = eval(&center).unwrap().0;
        if best.as_ref().map_or(true, |b| w > b.0) {
            best = Some((w, center));
        }
    }
    let (welfare, x) = best.unwrap();
    let (_, dispatch) = eval(&x).unwrap();

    // one-cell sensitivities, evaluated without the inequality limits so
    // that they reflect the smoothness of the objective
    let free = |x: &[i64]| welfare_at(grid, &devs, &lattice_voltages(grid, x), false);
    let mut welfare_bound = 0.0;
    let mut dispatch_bound: f64 = 0.0;
    for d in 0..dim {
        let mut dw: f64 = 0.0;
        for s in [-1, 1] {
            let mut y = x.clone();
            y[d] += s;
            if let Some((w, g)) = free(&y) {
                dw = dw.max((w - welfare).abs());
                for (a, b) in g.iter().zip(&dispatch) {
                    dispatch_bound = dispatch_bound.max((a - b).abs());
                }
            }
        }
        welfare_bound += dw;
    }
    OracleResult {
        welfare,
        v: lattice_voltages(grid, &x),
        dispatch,
        welfare_bound: 2.0 * welfare_bound,
        dispatch_bound: 2.0 * dim as f64 * dispatch_bound,
    }
}

// ---------------------------------------------------------------------------
// Feasible-point witness: fix the voltages, optimize dispatch and DC flows.

/// Welfare of the best dispatch at fixed voltages `v`, or `None` when the
/// voltage-dependent limits are violated by more than `tol` or no dispatch
/// balances the injections.
pub fn fixed_voltage_welfare(grid: &Grid, v: &[Complex64], tol: f64) -> Option<f64> {
    if voltage_violation(grid, v) > tol {
        return None;
    }
    let cs = ConstraintSystem::build(grid).unwrap();
    let s = bus_injections(grid, v);
    let n = grid.n_buses();
    let mut prog = ConicProgram::new();
    let dc = prog.add_vars("dc", cs.dc.n_vars);
    for k in 0..cs.dc.n_vars {
        prog.add_constraint(
            "dc bounds",
            ConeKind::Nonneg,
            vec![
                Affine::var(dc + k).plus(-cs.dc.lower[k]),
                Affine::constant(cs.dc.upper[k]).term(dc + k, -1.0),
            ],
        );
    }
    let mut balance: Vec<Affine> = (0..2 * n)
        .map(|r| Affine::constant(if r < n { -s[r].re } else { -s[r - n].im }))
        .collect();
    for bus in 0..n {
        for &(var, c) in &cs.dc.h_p[bus] {
            balance[bus].add_term(dc + var, -c);
        }
        for &(var, c) in &cs.dc.h_q[bus] {
            balance[n + bus].add_term(dc + var, -c);
        }
    }
    let scale = 1000.0;
    for g in &grid.generators {
        let var = prog.add_vars("gen", 2);
        let rows = g
            .capability
            .halfplanes()
            .into_iter()
            .map(|(a, b)| Affine::constant(b).term(var, -a[0]).term(var + 1, -a[1]))
            .collect();
        prog.add_constraint("gen region", ConeKind::Nonneg, rows);
        balance[g.bus].add_term(var, 1.0);
        balance[n + g.bus].add_term(var + 1, 1.0);
        match &g.cost {
            CostFn::Quadratic { c2, c1, c0 } => {
                let t = prog.add_vars("cost", 1);
                prog.objective.add_term(t, -1.0);
                prog.add_constraint(
                    "cost epigraph",
                    ConeKind::RotatedSoc,
                    vec![
                        Affine::var(t).term(var, -c1 / scale).plus(-c0 / scale),
                        Affine::constant(1.0),
                        Affine::default().term(var, (c2 / scale).sqrt()),
                    ],
                );
            }
            CostFn::PiecewiseLinear { .. } => {
                let t = prog.add_vars("cost", 1);
                prog.objective.add_term(t, -1.0);
                let rows = g
                    .cost
                    .segments()
                    .unwrap()
                    .into_iter()
                    .map(|sg| Affine::var(t).term(var, -sg.slope / scale).plus(-sg.offset / scale))
                    .collect();
                prog.add_constraint("cost epigraph", ConeKind::Nonneg, rows);
            }
        }
    }
    for l in &grid.loads {
        match &l.region {
            LoadRegion::Fixed { p, q } => {
                balance[l.bus].constant -= p;
                balance[n + l.bus].constant -= q;
                prog.objective.constant += l.benefit.value(*p) / scale;
            }
            LoadRegion::Box {
                p_min,
                p_max,
                q_min,
                q_max,
            } => {
                let var = prog.add_vars("load", 2);
                prog.add_constraint(
                    "load region",
                    ConeKind::Nonneg,
                    vec![
                        Affine::var(var).plus(-p_min),
                        Affine::constant(*p_max).term(var, -1.0),
                        Affine::var(var + 1).plus(-q_min),
                        Affine::constant(*q_max).term(var + 1, -1.0),
                    ],
                );
                balance[l.bus].add_term(var, -1.0);
                balance[n + l.bus].add_term(var + 1, -1.0);
                if !l.benefit.is_zero() {
                    let u = prog.add_vars("benefit", 1);
                    prog.objective.add_term(u, 1.0);
                    let rows = l
                        .benefit
                        .segments()
                        .into_iter()
                        .map(|sg| Affine::constant(sg.offset / scale).term(var, sg.slope / scale).term(u, -1.0))
                        .collect();
                    prog.add_constraint("benefit hypograph", ConeKind::Nonneg, rows);
                }
            }
        }
    }
    // allow the balance to be met within tol so a slightly inexact witness still counts
    for row in balance {
        prog.add_constraint("balance", ConeKind::Nonneg, vec![row.clone().plus(tol), row.scaled(-1.0).plus(tol)]);
    }
    let sol = conic::solve(&prog, 1e-9);
    (sol.status == Status::Optimal).then(|| sol.objective * scale)
}

// ---------------------------------------------------------------------------
// Dual function evaluated device by device.

/// `max_{P,Q in box} λ_p P + λ_q Q - C(P)` for a quadratic or
/// piecewise-linear cost.
pub fn profit(lambda: [f64; 2], g: &GenSpec) -> f64 {
    let Capability::Box {
        p_min,
        p_max,
        q_min,
        q_max,
    } = g.capability
    else {
        panic!("box regions only")
    };
    let q = if lambda[1] >= 0.0 { q_max } else { q_min };
    let f = |p: f64| lambda[0] * p - g.cost.value(p);
    let mut cands = vec![p_min, p_max];
    match &g.cost {
        CostFn::Quadratic { c2, c1, .. } if *c2 > 0.0 => cands.push(((lambda[0] - c1) / (2.0 * c2)).clamp(p_min, p_max)),
        CostFn::PiecewiseLinear { points } => cands.extend(points.iter().map(|p| p[0].clamp(p_min, p_max))),
        _ => {}
    }
    cands.into_iter().map(f).fold(f64::NEG_INFINITY, f64::max) + lambda[1] * q
}

/// `max_{d in region} B(d_P) - λ^T d`.
pub fn surplus(lambda: [f64; 2], l: &LoadSpec) -> f64 {
    match &l.region {
        LoadRegion::Fixed { p, q } => l.benefit.value(*p) - lambda[0] * p - lambda[1] * q,
        LoadRegion::Box {
            p_min,
            p_max,
            q_min,
            q_max,
        } => {
            let mut cands = vec![*p_min, *p_max];
            if let BenefitFn::PiecewiseLinear { points } = &l.benefit {
                cands.extend(points.iter().map(|p| p[0].clamp(*p_min, *p_max)));
            }
            let best = cands
                .into_iter()
                .map(|p| l.benefit.value(p) - lambda[0] * p)
                .fold(f64::NEG_INFINITY, f64::max);
            best - (lambda[1] * q_min).min(lambda[1] * q_max)
        }
    }
}

/// Dual objective `Σ profit + Σ surplus + μ^T b` in $/h.
pub fn dual_value(grid: &Grid, cs: &ConstraintSystem, lambda: &[[f64; 2]], mu: &[f64]) -> f64 {
    let p: f64 = grid.generators.iter().map(|g| profit(lambda[g.bus], g)).sum();
    let s: f64 = grid.loads.iter().map(|l| surplus(lambda[l.bus], l)).sum();
    let b: f64 = cs.rows.iter().zip(mu).map(|(r, m)| r.b * m).sum();
    p + s + b
}

// ---------------------------------------------------------------------------
// Random small instances.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    /// AC spanning tree only.
    Tree,
    /// AC spanning tree plus one DC branch closing a cycle.
    Hybrid,
    /// AC spanning tree plus extra AC branches.
    Meshed,
}

/// Random instance with `n` buses, moderate loading and loose limits.
pub fn random_grid(seed: u64, n: usize, topology: Topology) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buses = (0..n)
        .map(|i| {
            let mut b = bus(i + 1, rng.gen_range(0.9..0.95), rng.gen_range(1.05..1.1));
            if rng.gen_bool(0.2) {
                b.b_shunt = rng.gen_range(-0.05..0.1);
            }
            b
        })
        .collect();
    let line = |rng: &mut ChaCha8Rng, i: usize, j: usize| {
        let r = rng.gen_range(0.005..0.04);
        let x = rng.gen_range(0.04..0.2);
        let mut br = AcBranch::line(i, j, r, x, rng.gen_range(0.0..0.1));
        if rng.gen_bool(0.5) {
            br = br.with_current_limit(rng.gen_range(1.0..3.0));
        }
        if rng.gen_bool(0.2) {
            br.tap = rng.gen_range(0.95..1.05);
        }
        br
    };
    let mut ac = Vec::new();
    let mut edges = std::collections::BTreeSet::new();
    for j in 1..n {
        let i = rng.gen_range(0..j);
        ac.push(line(&mut rng, i, j));
        edges.insert((i, j));
    }
    let mut dc = Vec::new();
    let extra = match topology {
        Topology::Tree => 0,
        _ => 1 + rng.gen_range(0..n.saturating_sub(2).max(1)),
    };
    for _ in 0..extra {
        for _ in 0..20 {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            let key = (i.min(j), i.max(j));
            if i == j || edges.contains(&key) {
                continue;
            }
            edges.insert(key);
            match topology {
                Topology::Meshed => ac.push(line(&mut rng, i, j)),
                _ => dc.push(dc_line(i, j, rng.gen_range(0.5..2.0), 0.035, 0.2)),
            }
            break;
        }
    }
    let mut gens = vec![gen(0, (0.0, 4.0), (-2.0, 2.0), rng.gen_range(0.0..500.0), rng.gen_range(1000.0..3000.0))];
    let mut loads = Vec::new();
    for b in 1..n {
        if rng.gen_bool(0.5) {
            gens.push(gen(b, (0.0, rng.gen_range(0.5..2.0)), (-1.0, 1.0), rng.gen_range(0.0..800.0), rng.gen_range(1500.0..5000.0)));
        }
        if rng.gen_bool(0.3) {
            loads.push(flexible_load(b, (0.1, 0.8), (0.0, 0.2), rng.gen_range(2000.0..6000.0)));
        } else {
            loads.push(fixed_load(b, rng.gen_range(0.2..0.9), rng.gen_range(0.0..0.3)));
        }
    }
    grid(&format!("random-{seed}"), buses, ac, dc, gens, loads)
}

// ---------------------------------------------------------------------------
// Hand-built hybrid instances small enough for the grid-search oracle.

/// `(grid, angle search window in rad)` pairs.
pub fn tiny_hybrid_instances() -> Vec<(Grid, f64)> {
    let two = |v: (f64, f64)| vec![bus(1, v.0, v.1), bus(2, v.0, v.1)];
    let three = |v: (f64, f64)| vec![bus(1, v.0, v.1), bus(2, v.0, v.1), bus(3, v.0, v.1)];
    let g0 = gen(0, (0.0, 3.0), (-1.0, 1.0), 100.0, 2000.0);
    let g1 = gen(1, (0.0, 1.0), (-1.0, 1.0), 200.0, 4000.0);

    let base_line = AcBranch::line(0, 1, 0.02, 0.1, 0.04);
    let uncongested = grid(
        "two-bus line",
        two((0.95, 1.05)),
        vec![base_line.clone()],
        vec![],
        vec![g0.clone(), g1.clone()],
        vec![fixed_load(1, 1.2, 0.4)],
    );
    let congested = grid(
        "two-bus congested line",
        two((0.95, 1.05)),
        vec![base_line.clone().with_current_limit(0.8)],
        vec![],
        vec![g0.clone(), g1.clone()],
        vec![fixed_load(1, 1.2, 0.4)],
    );
    let parallel_dc = grid(
        "two-bus line with parallel DC link",
        two((0.95, 1.05)),
        vec![base_line.with_current_limit(0.5)],
        vec![dc_line(0, 1, 0.6, 0.035, 0.2)],
        vec![g0.clone(), g1.clone()],
        vec![fixed_load(1, 1.0, 0.3)],
    );
    let triangle = grid(
        "three-bus hybrid triangle",
        three((0.94, 1.06)),
        vec![
            AcBranch::line(0, 1, 0.01, 0.08, 0.02),
            AcBranch::line(1, 2, 0.02, 0.12, 0.0).with_current_limit(0.7),
        ],
        vec![dc_line(0, 2, 0.5, 0.035, 0.15)],
        vec![g0.clone(), g1.clone(), gen(2, (0.0, 0.8), (-0.6, 0.6), 300.0, 5000.0)],
        vec![
            fixed_load(1, 0.6, 0.2),
            fixed_load(2, 0.4, 0.1),
            flexible_load(2, (0.3, 1.2), (0.1, 0.3), 4500.0),
        ],
    );
    let mut transformer = AcBranch::line(0, 1, 0.005, 0.06, 0.0);
    transformer.tap = 1.03;
    transformer.shift = 0.03;
    let mut buses = three((0.95, 1.04));
    buses[2].b_shunt = 0.05;
    let tapped = grid(
        "three-bus tapped chain",
        buses,
        vec![transformer, AcBranch::line(1, 2, 0.03, 0.15, 0.06)],
        vec![],
        vec![g0, g1, gen(2, (0.0, 0.5), (-0.5, 0.5), 400.0, 6000.0)],
        vec![fixed_load(1, 0.7, 0.2), fixed_load(2, 0.9, 0.3)],
    );
    vec![(uncongested, 0.3), (congested, 0.3), (parallel_dc, 0.3), (triangle, 0.3), (tapped, 0.3)]
}

/// Two buses, cheap unit (20 $/MWh) at the first, expensive unit (50 $/MWh)
/// and a 1 p.u. load at the second, line limit `limit` p.u.
pub fn two_node_market(limit: Option<f64>) -> Grid {
    let mut line = AcBranch::line(0, 1, 0.01, 0.1, 0.0);
    if let Some(l) = limit {
        line = line.with_current_limit(l);
    }
    grid(
        "two-node market",
        vec![bus(1, 0.9, 1.1), bus(2, 0.9, 1.1)],
        vec![line],
        vec![],
        vec![
            gen(0, (0.0, 2.0), (-1.0, 1.0), 0.0, 2000.0),
            gen(1, (0.0, 2.0), (-1.0, 1.0), 0.0, 5000.0),
        ],
        vec![fixed_load(1, 1.0, 0.2)],
    )
}

// ---------------------------------------------------------------------------
// Feasible points recovered from a semidefinite solution.

/// Leading eigenvector of `v` scaled to `sqrt(λ₁)`, rotated so that entry
/// `reference` is real and positive.
pub fn rank_one_voltages(v: &nalgebra::DMatrix<Complex64>, reference: usize) -> Vec<Complex64> {
    let eig = nalgebra::SymmetricEigen::new(v.clone());
    let (k, l1) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, l)| (k, *l))
        .unwrap();
    let col = eig.eigenvectors.column(k);
    let phase = col[reference] / col[reference].norm();
    col.iter().map(|x| x / phase * l1.max(0.0).sqrt()).collect()
}

/// Buses able to absorb a reactive mismatch.
fn reactive_flexible(grid: &Grid) -> Vec<bool> {
    let mut flex = vec![false; grid.n_buses()];
    for g in &grid.generators {
        flex[g.bus] = true;
    }
    for l in &grid.loads {
        if let LoadRegion::Box { q_min, q_max, .. } = l.region {
            flex[l.bus] |= q_max > q_min;
        }
    }
    for d in &grid.dc_branches {
        if d.q_capability > 0.0 {
            flex[d.from] = true;
            flex[d.to] = true;
        }
    }
    flex
}

/// Newton power flow from `v0` towards the AC injections `target`.
///
/// Active power is matched at every bus except the reference, reactive power
/// at buses without reactive flexibility. Angles move everywhere except the
/// reference; magnitudes move only where reactive power is matched.
pub fn repair_voltages(grid: &Grid, v0: &[Complex64], target: &[Complex64]) -> Option<Vec<Complex64>> {
    let n = grid.n_buses();
    let r = grid.reference_bus;
    let flex = reactive_flexible(grid);
    let ang: Vec<usize> = (0..n).filter(|&i| i != r).collect();
    let mag: Vec<usize> = (0..n).filter(|&i| !flex[i]).collect();
    let dim = ang.len() + mag.len();
    let mut x: Vec<f64> = ang.iter().map(|&i| v0[i].arg()).chain(mag.iter().map(|&i| v0[i].norm())).collect();
    let voltages = |x: &[f64]| {
        let mut v = v0.to_vec();
        for (k, &i) in ang.iter().enumerate() {
            v[i] = Complex64::from_polar(v[i].norm(), x[k]);
        }
        for (k, &i) in mag.iter().enumerate() {
            v[i] = Complex64::from_polar(x[ang.len() + k], v[i].arg());
        }
        v
    };
    let mismatch = |x: &[f64]| -> nalgebra::DVector<f64> {
        let s = bus_injections(grid, &voltages(x));
        let p = ang.iter().map(|&i| s[i].re - target[i].re);
        let q = mag.iter().map(|&i| s[i].im - target[i].im);
        nalgebra::DVector::from_iterator(dim, p.chain(q))
    };
    for _ in 0..30 {
        let f = mismatch(&x);
        if f.amax() < 1e-13 {
            return Some(voltages(&x));
        }
        let mut jac = nalgebra::DMatrix::zeros(dim, dim);
        for c in 0..dim {
            let h = 1e-7;
            let mut xp = x.clone();
            xp[c] += h;
            let mut xm = x.clone();
            xm[c] -= h;
            jac.set_column(c, &((mismatch(&xp) - mismatch(&xm)) / (2.0 * h)));
        }
        let step = jac.lu().solve(&f)?;
        for (xi, d) in x.iter_mut().zip(step.iter()) {
            *xi -= d;
        }
    }
    let v = voltages(&x);
    (mismatch(&x).amax() < 1e-11).then_some(v)
}

/// Welfare of an AC-feasible point recovered from a semidefinite solution:
/// rank-one voltages, repaired onto the relaxation's dispatch, then
/// re-dispatched at fixed voltages with balance held to `tol`.
pub fn sdr_witness(grid: &Grid, sdr: &gridlmp::sdr::SdrSolution, tol: f64) -> Option<f64> {
    let cs = ConstraintSystem::build(grid).unwrap();
    let n = grid.n_buses();
    let v0 = rank_one_voltages(&sdr.v, grid.reference_bus);
    let target: Vec<Complex64> = (0..n)
        .map(|i| {
            let dc_p: f64 = cs.dc.h_p[i].iter().map(|&(k, c)| c * sdr.p[k]).sum();
            let dc_q: f64 = cs.dc.h_q[i].iter().map(|&(k, c)| c * sdr.p[k]).sum();
            Complex64::new(sdr.g[i][0] - sdr.d[i][0] - dc_p, sdr.g[i][1] - sdr.d[i][1] - dc_q)
        })
        .collect();
    let v = repair_voltages(grid, &v0, &target)?;
    fixed_voltage_welfare(grid, &v, tol)
}
