//! Conversion of a meshed AC grid into the hybrid architecture: the AC
//! subgraph is cut down to a minimum spanning tree under series resistance
//! and every other AC branch becomes a point-to-point DC link.

use petgraph::unionfind::UnionFind;
use serde::Serialize;

use super::{DcBranch, Grid, UNRATED_CURRENT};
use crate::error::{Error, Result};

/// What `upgrade_to_hybrid` changed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpgradeSummary {
    /// Indices (in the input grid) of the AC branches converted to DC.
    pub converted: Vec<usize>,
    pub ac_before: usize,
    pub fraction: f64,
    pub total_dc_capacity: f64,
}

/// Active-power capacity of a converted branch at nominal voltage.
fn dc_capacity(i_max: Option<f64>) -> f64 {
    i_max.unwrap_or(UNRATED_CURRENT)
}

pub fn upgrade_to_hybrid(grid: &Grid, loss_factor: f64, q_cap_fraction: f64) -> Result<(Grid, UpgradeSummary)> {
    let n = grid.n_buses();
    if !grid.ac_connected() {
        return Err(Error::Disconnected);
    }
    let mut order: Vec<usize> = (0..grid.ac_branches.len()).collect();
    // stable sort keeps the lowest index first among equal resistances
    order.sort_by(|&a, &b| grid.ac_branches[a].series_r.total_cmp(&grid.ac_branches[b].series_r));

    let mut uf = UnionFind::<usize>::new(n);
    let mut keep = vec![false; grid.ac_branches.len()];
    for k in order {
        let br = &grid.ac_branches[k];
        keep[k] = uf.union(br.from, br.to);
    }

    let mut out = grid.clone();
    out.ac_branches.clear();
    let mut converted = Vec::new();
    let mut total = 0.0;
    for (k, br) in grid.ac_branches.iter().enumerate() {
        if keep[k] {
            out.ac_branches.push(br.clone());
        } else {
            let p_max = dc_capacity(br.i_max_from);
            total += p_max;
            converted.push(k);
            out.dc_branches.push(DcBranch {
                from: br.from,
                to: br.to,
                p_min: -p_max,
                p_max,
                loss_factor,
                q_capability: q_cap_fraction * p_max,
            });
        }
    }
    let ac_before = grid.ac_branches.len();
    let summary = UpgradeSummary {
        fraction: if ac_before == 0 {
            0.0
        } else {
            converted.len() as f64 / ac_before as f64
        },
        converted,
        ac_before,
        total_dc_capacity: total,
    };
    Ok((out, summary))
}
