//! Producer cost and consumer benefit functions together with the P-Q
//! regions they are defined on.
//!
//! All powers are in p.u. on the system base and all money values in $/h.
//! Costs and benefits depend on active power only; reactive power carries
//! no price of its own, it only enters through the capability region.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SLOPE_TOL: f64 = 1e-9;

/// Convex producer cost `C(P)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostFn {
    /// `c2 P^2 + c1 P + c0` with `c2 >= 0`.
    Quadratic { c2: f64, c1: f64, c0: f64 },
    /// Convex piecewise-linear curve through `(P, C)` points sorted by `P`.
    /// Outside the first/last point the end segments are extended.
    PiecewiseLinear { points: Vec<[f64; 2]> },
}

/// Concave consumer benefit `B(P)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenefitFn {
    /// Inelastic demand carries no benefit term.
    #[default]
    Zero,
    /// Concave piecewise-linear curve through `(P, B)` points sorted by `P`.
    PiecewiseLinear { points: Vec<[f64; 2]> },
}

/// P-Q capability region of a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Capability {
    Box {
        p_min: f64,
        p_max: f64,
        q_min: f64,
        q_max: f64,
    },
    /// Convex polygon, vertices in counter-clockwise order.
    Polygon { vertices: Vec<[f64; 2]> },
}

/// Admissible load configurations at a bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoadRegion {
    Fixed { p: f64, q: f64 },
    Box {
        p_min: f64,
        p_max: f64,
        q_min: f64,
        q_max: f64,
    },
}

/// A linear piece `value(P) = offset + slope * P`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub slope: f64,
    pub offset: f64,
}

fn pwl_segments(points: &[[f64; 2]]) -> Vec<Segment> {
    if points.len() == 1 {
        return vec![Segment {
            slope: 0.0,
            offset: points[0][1],
        }];
    }
    points
        .windows(2)
        .map(|w| {
            let slope = (w[1][1] - w[0][1]) / (w[1][0] - w[0][0]);
            Segment {
                slope,
                offset: w[0][1] - slope * w[0][0],
            }
        })
        .collect()
}

/// Evaluates a PWL curve with linear extrapolation past its ends.
fn pwl_eval(points: &[[f64; 2]], p: f64) -> f64 {
    let segs = pwl_segments(points);
    let n = points.len();
    let idx = if n == 1 {
        0
    } else {
        // segment i spans points[i]..points[i+1]
        let mut i = 0;
        while i + 1 < segs.len() && p > points[i + 1][0] {
            i += 1;
        }
        i
    };
    segs[idx].offset + segs[idx].slope * p
}

fn check_pwl_points(points: &[[f64; 2]], what: &str) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidGrid(format!("{what}: empty piecewise-linear curve")));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidGrid(format!("{what}: non-finite breakpoint")));
    }
    if points.windows(2).any(|w| w[1][0] <= w[0][0]) {
        return Err(Error::InvalidGrid(format!("{what}: breakpoints not strictly increasing")));
    }
    Ok(())
}

impl CostFn {
    pub fn linear(marginal: f64) -> Self {
        CostFn::Quadratic {
            c2: 0.0,
            c1: marginal,
            c0: 0.0,
        }
    }

    pub fn value(&self, p: f64) -> f64 {
        match self {
            CostFn::Quadratic { c2, c1, c0 } => c2 * p * p + c1 * p + c0,
            CostFn::PiecewiseLinear { points } => pwl_eval(points, p),
        }
    }

    /// Left and right derivative at `p`.
    pub fn derivative_interval(&self, p: f64) -> (f64, f64) {
        match self {
            CostFn::Quadratic { c2, c1, .. } => {
                let d = 2.0 * c2 * p + c1;
                (d, d)
            }
            CostFn::PiecewiseLinear { points } => pwl_derivative(points, p),
        }
    }

    /// Linear pieces whose pointwise maximum is the PWL curve. `None` for quadratics.
    pub fn segments(&self) -> Option<Vec<Segment>> {
        match self {
            CostFn::Quadratic { .. } => None,
            CostFn::PiecewiseLinear { points } => Some(pwl_segments(points)),
        }
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            CostFn::Quadratic { .. } => Vec::new(),
            CostFn::PiecewiseLinear { points } => points.iter().map(|p| p[0]).collect(),
        }
    }

    /// Multiplies the function pointwise by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            CostFn::Quadratic { c2, c1, c0 } => CostFn::Quadratic {
                c2: c2 * factor,
                c1: c1 * factor,
                c0: c0 * factor,
            },
            CostFn::PiecewiseLinear { points } => CostFn::PiecewiseLinear {
                points: points.iter().map(|p| [p[0], p[1] * factor]).collect(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CostFn::Quadratic { c2, c1, c0 } => {
                if ![c2, c1, c0].iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidGrid("non-finite cost coefficient".into()));
                }
                if *c2 < 0.0 {
                    return Err(Error::InvalidGrid("quadratic cost must be convex".into()));
                }
            }
            CostFn::PiecewiseLinear { points } => {
                check_pwl_points(points, "cost")?;
                let segs = pwl_segments(points);
                if segs.windows(2).any(|w| w[1].slope < w[0].slope - SLOPE_TOL * (1.0 + w[0].slope.abs())) {
                    return Err(Error::InvalidGrid("piecewise-linear cost must be convex".into()));
                }
            }
        }
        Ok(())
    }
}

fn pwl_derivative(points: &[[f64; 2]], p: f64) -> (f64, f64) {
    let segs = pwl_segments(points);
    if segs.len() == 1 {
        return (segs[0].slope, segs[0].slope);
    }
    let tol = 1e-9 * (1.0 + p.abs());
    for (i, w) in points.windows(2).enumerate() {
        if (p - w[1][0]).abs() <= tol && i + 1 < segs.len() {
            return (segs[i].slope, segs[i + 1].slope);
        }
        if p < w[1][0] || i + 1 == segs.len() {
            return (segs[i].slope, segs[i].slope);
        }
    }
    unreachable!()
}

impl BenefitFn {
    pub fn value(&self, p: f64) -> f64 {
        match self {
            BenefitFn::Zero => 0.0,
            BenefitFn::PiecewiseLinear { points } => pwl_eval(points, p),
        }
    }

    /// Linear pieces whose pointwise minimum is the curve.
    pub fn segments(&self) -> Vec<Segment> {
        match self {
            BenefitFn::Zero => vec![Segment {
                slope: 0.0,
                offset: 0.0,
            }],
            BenefitFn::PiecewiseLinear { points } => pwl_segments(points),
        }
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            BenefitFn::Zero => Vec::new(),
            BenefitFn::PiecewiseLinear { points } => points.iter().map(|p| p[0]).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, BenefitFn::Zero)
    }

    pub fn validate(&self) -> Result<()> {
        if let BenefitFn::PiecewiseLinear { points } = self {
            check_pwl_points(points, "benefit")?;
            let segs = pwl_segments(points);
            if segs.windows(2).any(|w| w[1].slope > w[0].slope + SLOPE_TOL * (1.0 + w[0].slope.abs())) {
                return Err(Error::InvalidGrid("piecewise-linear benefit must be concave".into()));
            }
        }
        Ok(())
    }
}

impl Capability {
    pub fn fixed(p: f64, q: f64) -> Self {
        Capability::Box {
            p_min: p,
            p_max: p,
            q_min: q,
            q_max: q,
        }
    }

    pub fn p_range(&self) -> (f64, f64) {
        match self {
            Capability::Box { p_min, p_max, .. } => (*p_min, *p_max),
            Capability::Polygon { vertices } => vertices
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v[0]), hi.max(v[0]))),
        }
    }

    /// Reactive range of the vertical slice at active power `p`.
    pub fn q_range(&self, p: f64) -> (f64, f64) {
        match self {
            Capability::Box { q_min, q_max, .. } => (*q_min, *q_max),
            Capability::Polygon { vertices } => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                let n = vertices.len();
                for i in 0..n {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    let (pl, ph) = (a[0].min(b[0]), a[0].max(b[0]));
                    if p < pl - 1e-12 || p > ph + 1e-12 {
                        continue;
                    }
                    if (b[0] - a[0]).abs() < 1e-14 {
                        lo = lo.min(a[1].min(b[1]));
                        hi = hi.max(a[1].max(b[1]));
                    } else {
                        let t = ((p - a[0]) / (b[0] - a[0])).clamp(0.0, 1.0);
                        let q = a[1] + t * (b[1] - a[1]);
                        lo = lo.min(q);
                        hi = hi.max(q);
                    }
                }
                (lo, hi)
            }
        }
    }

    /// Active-power coordinates where the slice bounds change slope.
    pub fn p_breakpoints(&self) -> Vec<f64> {
        match self {
            Capability::Box { p_min, p_max, .. } => vec![*p_min, *p_max],
            Capability::Polygon { vertices } => vertices.iter().map(|v| v[0]).collect(),
        }
    }

    /// Half-planes `a_p P + a_q Q <= b` describing the region.
    pub fn halfplanes(&self) -> Vec<([f64; 2], f64)> {
        match self {
            Capability::Box {
                p_min,
                p_max,
                q_min,
                q_max,
            } => vec![
                ([-1.0, 0.0], -p_min),
                ([1.0, 0.0], *p_max),
                ([0.0, -1.0], -q_min),
                ([0.0, 1.0], *q_max),
            ],
            Capability::Polygon { vertices } => {
                let n = vertices.len();
                (0..n)
                    .map(|i| {
                        let a = vertices[i];
                        let b = vertices[(i + 1) % n];
                        // outward normal of a counter-clockwise edge
                        let normal = [b[1] - a[1], a[0] - b[0]];
                        let len = (normal[0] * normal[0] + normal[1] * normal[1]).sqrt();
                        let normal = [normal[0] / len, normal[1] / len];
                        (normal, normal[0] * a[0] + normal[1] * a[1])
                    })
                    .collect()
            }
        }
    }

    /// Largest violation of the region's half-planes (negative when strictly inside).
    pub fn violation(&self, g: [f64; 2]) -> f64 {
        self.halfplanes()
            .iter()
            .map(|(a, b)| a[0] * g[0] + a[1] * g[1] - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Multiplies active and reactive limits by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            Capability::Box {
                p_min,
                p_max,
                q_min,
                q_max,
            } => Capability::Box {
                p_min: p_min * factor,
                p_max: p_max * factor,
                q_min: q_min * factor,
                q_max: q_max * factor,
            },
            Capability::Polygon { vertices } => Capability::Polygon {
                vertices: vertices.iter().map(|v| [v[0] * factor, v[1] * factor]).collect(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Capability::Box {
                p_min,
                p_max,
                q_min,
                q_max,
            } => {
                if ![p_min, p_max, q_min, q_max].iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidGrid("non-finite generator limit".into()));
                }
                if p_min > p_max || q_min > q_max {
                    return Err(Error::InvalidGrid("empty generator capability box".into()));
                }
            }
            Capability::Polygon { vertices } => {
                if vertices.len() < 3 {
                    return Err(Error::InvalidGrid("capability polygon needs >= 3 vertices".into()));
                }
                let n = vertices.len();
                for i in 0..n {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    let c = vertices[(i + 2) % n];
                    let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
                    if cross < -1e-12 {
                        return Err(Error::InvalidGrid(
                            "capability polygon must be convex and counter-clockwise".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

impl LoadRegion {
    pub fn p_range(&self) -> (f64, f64) {
        match self {
            LoadRegion::Fixed { p, .. } => (*p, *p),
            LoadRegion::Box { p_min, p_max, .. } => (*p_min, *p_max),
        }
    }

    pub fn q_range(&self) -> (f64, f64) {
        match self {
            LoadRegion::Fixed { q, .. } => (*q, *q),
            LoadRegion::Box { q_min, q_max, .. } => (*q_min, *q_max),
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, LoadRegion::Fixed { .. })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            LoadRegion::Fixed { p, q } => LoadRegion::Fixed {
                p: p * factor,
                q: q * factor,
            },
            LoadRegion::Box {
                p_min,
                p_max,
                q_min,
                q_max,
            } => LoadRegion::Box {
                p_min: p_min * factor,
                p_max: p_max * factor,
                q_min: q_min * factor,
                q_max: q_max * factor,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (pl, ph) = self.p_range();
        let (ql, qh) = self.q_range();
        if ![pl, ph, ql, qh].iter().all(|v| v.is_finite()) || pl > ph || ql > qh {
            return Err(Error::InvalidGrid("empty or non-finite load region".into()));
        }
        Ok(())
    }
}

/// Maximizes a concave function of `P` on `[lo, hi]` given a list of
/// candidate points that contains every maximizer.
fn best_of(candidates: impl IntoIterator<Item = f64>, lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, lo);
    for p in candidates {
        let p = p.clamp(lo, hi);
        let v = f(p);
        if v > best.0 {
            best = (v, p);
        }
    }
    best
}

/// Producer's profit `max_{g in G} lambda^T g - C(g_P)` and a maximizer.
pub fn max_profit(lambda: [f64; 2], cap: &Capability, cost: &CostFn) -> (f64, [f64; 2]) {
    let (lo, hi) = cap.p_range();
    let q_best = |p: f64| {
        let (ql, qh) = cap.q_range(p);
        if lambda[1] >= 0.0 {
            qh
        } else {
            ql
        }
    };
    let objective = |p: f64| lambda[0] * p - cost.value(p) + lambda[1] * q_best(p);

    let mut knots: Vec<f64> = cap.p_breakpoints();
    knots.extend(cost.breakpoints().into_iter().filter(|p| *p > lo && *p < hi));
    knots.push(lo);
    knots.push(hi);
    knots.sort_by(f64::total_cmp);
    knots.dedup();

    let mut candidates = knots.clone();
    if let CostFn::Quadratic { c2, c1, .. } = cost {
        if *c2 > 0.0 {
            // between knots the reactive term is linear in P
            for w in knots.windows(2) {
                let (a, b) = (w[0], w[1]);
                if b - a <= 0.0 {
                    continue;
                }
                let slope_q = (q_best(b) - q_best(a)) / (b - a) * lambda[1];
                let stationary = (lambda[0] + slope_q - c1) / (2.0 * c2);
                candidates.push(stationary.clamp(a, b));
            }
        }
    }
    let (value, p) = best_of(candidates, lo, hi, objective);
    (value, [p, q_best(p)])
}

/// Consumer's surplus `max_{d in D} B(d_P) - lambda^T d` and a maximizer.
pub fn max_surplus(lambda: [f64; 2], region: &LoadRegion, benefit: &BenefitFn) -> (f64, [f64; 2]) {
    match region {
        LoadRegion::Fixed { p, q } => (benefit.value(*p) - lambda[0] * p - lambda[1] * q, [*p, *q]),
        LoadRegion::Box {
            p_min,
            p_max,
            q_min,
            q_max,
        } => {
            let mut candidates = benefit.breakpoints();
            candidates.push(*p_min);
            candidates.push(*p_max);
            let (vp, p) = best_of(candidates, *p_min, *p_max, |p| benefit.value(p) - lambda[0] * p);
            let q = if lambda[1] > 0.0 { *q_min } else { *q_max };
            (vp - lambda[1] * q, [p, q])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pwl_cost_evaluates_segments() {
        let c = CostFn::PiecewiseLinear {
            points: vec![[0.0, 0.0], [1.0, 10.0], [2.0, 30.0]],
        };
        assert!((c.value(1.5) - 20.0).abs() < 1e-12);
        assert_eq!(c.derivative_interval(1.0), (10.0, 20.0));
        assert_eq!(c.derivative_interval(0.5), (10.0, 10.0));
        c.validate().unwrap();
    }

    #[test]
    fn nonconvex_pwl_is_rejected() {
        let c = CostFn::PiecewiseLinear {
            points: vec![[0.0, 0.0], [1.0, 20.0], [2.0, 30.0]],
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn profit_at_marginal_price_is_flat_in_p() {
        let cap = Capability::Box {
            p_min: 0.0,
            p_max: 2.0,
            q_min: -1.0,
            q_max: 1.0,
        };
        let cost = CostFn::linear(30.0);
        let (v, _) = max_profit([30.0, 0.0], &cap, &cost);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn price_above_marginal_cost_pushes_to_upper_limit() {
        let cap = Capability::Box {
            p_min: 0.2,
            p_max: 2.0,
            q_min: -1.0,
            q_max: 1.0,
        };
        let (_, g) = max_profit([45.0, 0.0], &cap, &CostFn::linear(30.0));
        assert_eq!(g[0], 2.0);
        let (_, g) = max_profit([15.0, -1.0], &cap, &CostFn::linear(30.0));
        assert_eq!(g, [0.2, -1.0]);
    }

    #[test]
    fn polygon_slices() {
        let cap = Capability::Polygon {
            vertices: vec![[0.0, -1.0], [2.0, -0.5], [2.0, 0.5], [0.0, 1.0]],
        };
        cap.validate().unwrap();
        let (lo, hi) = cap.q_range(1.0);
        assert!((lo + 0.75).abs() < 1e-12 && (hi - 0.75).abs() < 1e-12);
        assert!(cap.violation([1.0, 0.0]) < 0.0);
        assert!(cap.violation([1.0, 0.9]) > 0.0);
    }
}
