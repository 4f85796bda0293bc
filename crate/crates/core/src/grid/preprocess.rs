//! Data cleanup applied before pricing: parallel-branch merging, minimum
//! resistance and rating adjustments.

use num_complex::Complex64;
use std::collections::HashMap;

use super::{AcBranch, Grid};
use crate::error::{Error, Result};

/// Reverses the orientation of a plain line.
fn flipped(br: &AcBranch) -> AcBranch {
    let reverse_drop = |nu: f64| {
        // ratio |v_to|/|v_from| = 1 - nu maps to its reciprocal
        let ratio = 1.0 - nu;
        if ratio <= 0.0 {
            f64::NEG_INFINITY
        } else {
            1.0 - 1.0 / ratio
        }
    };
    AcBranch {
        from: br.to,
        to: br.from,
        i_max_from: br.i_max_to,
        i_max_to: br.i_max_from,
        drop_lo: reverse_drop(br.drop_hi).max(-1.0),
        drop_hi: reverse_drop(br.drop_lo),
        ang_lo: -br.ang_hi,
        ang_hi: -br.ang_lo,
        ..br.clone()
    }
}

fn sum_limits(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? + b?)
}

/// Combines every group of AC branches sharing an unordered bus pair into
/// one equivalent branch. The merged branch keeps the position and
/// orientation of the first member of its group.
pub fn merge_parallel_branches(grid: &Grid) -> Result<Grid> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<(usize, usize), usize> = HashMap::new();
    for (k, br) in grid.ac_branches.iter().enumerate() {
        let key = (br.from.min(br.to), br.from.max(br.to));
        match slot.get(&key) {
            Some(&g) => groups[g].push(k),
            None => {
                slot.insert(key, groups.len());
                groups.push(vec![k]);
            }
        }
    }
    if groups.len() == grid.ac_branches.len() {
        return Ok(grid.clone());
    }

    let mut merged = Vec::with_capacity(groups.len());
    for group in groups {
        let lead = &grid.ac_branches[group[0]];
        if group.len() == 1 {
            merged.push(lead.clone());
            continue;
        }
        let mut members = Vec::with_capacity(group.len());
        for &k in &group {
            let br = &grid.ac_branches[k];
            if br.from == lead.from {
                members.push(br.clone());
            } else if br.is_transformer() {
                return Err(Error::AntiParallelTransformer {
                    from: lead.from,
                    to: lead.to,
                });
            } else {
                members.push(flipped(br));
            }
        }
        if members.iter().any(|m| m.shift != lead.shift) {
            return Err(Error::IncompatibleShifts {
                from: lead.from,
                to: lead.to,
            });
        }
        let tap = members.iter().map(|m| m.tap).fold(f64::NEG_INFINITY, f64::max);

        let mut y = Complex64::new(0.0, 0.0);
        let mut out = members[0].clone();
        out.tap = tap;
        out.shunt_b = 0.0;
        out.source_rows.clear();
        for (i, m) in members.iter().enumerate() {
            y += Complex64::new(m.series_r, m.series_x).inv();
            out.shunt_b += m.shunt_b;
            out.source_rows.extend(&m.source_rows);
            if i > 0 {
                out.i_max_from = sum_limits(out.i_max_from, m.i_max_from);
                out.i_max_to = sum_limits(out.i_max_to, m.i_max_to);
                out.drop_lo = out.drop_lo.max(m.drop_lo);
                out.drop_hi = out.drop_hi.min(m.drop_hi);
                out.ang_lo = out.ang_lo.max(m.ang_lo);
                out.ang_hi = out.ang_hi.min(m.ang_hi);
            }
        }
        let z = y.inv();
        out.series_r = z.re;
        out.series_x = z.im;
        merged.push(out);
    }
    Ok(Grid {
        ac_branches: merged,
        ..grid.clone()
    })
}

/// Raises every series resistance below `r_min` to exactly `r_min`.
/// Returns the adjusted grid and the number of modified branches.
pub fn enforce_min_resistance(grid: &Grid, r_min: f64) -> (Grid, usize) {
    let mut g = grid.clone();
    let mut count = 0;
    for br in &mut g.ac_branches {
        if br.series_r < r_min {
            br.series_r = r_min;
            count += 1;
        }
    }
    (g, count)
}

/// Multiplies the current limits of the listed AC branches (zero-based) by `factor`.
pub fn scale_branch_rating(grid: &Grid, branch_ids: &[usize], factor: f64) -> Result<Grid> {
    let mut g = grid.clone();
    for &k in branch_ids {
        let br = g.ac_branches.get_mut(k).ok_or(Error::UnknownBranch(k))?;
        br.i_max_from = br.i_max_from.map(|i| i * factor);
        br.i_max_to = br.i_max_to.map(|i| i * factor);
    }
    Ok(g)
}
