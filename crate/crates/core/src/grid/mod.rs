//! Hybrid AC/DC grid model.
//!
//! Buses are addressed by contiguous zero-based indices; the label of each
//! bus keeps the identifier of the source data for reporting. All electrical
//! quantities are per unit on `base_mva`, money in $/h.

mod bids;
mod preprocess;
mod upgrade;

pub use bids::{max_profit, max_surplus, BenefitFn, Capability, CostFn, LoadRegion, Segment};
pub use preprocess::{enforce_min_resistance, merge_parallel_branches, scale_branch_rating};
pub use upgrade::{upgrade_to_hybrid, UpgradeSummary};

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// Per-unit current bound used wherever a branch carries no rating.
pub const UNRATED_CURRENT: f64 = 99.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    /// Identifier in the source data.
    pub label: usize,
    pub v_min: f64,
    pub v_max: f64,
    /// Shunt conductance and susceptance, p.u. at 1 p.u. voltage.
    #[serde(default)]
    pub g_shunt: f64,
    #[serde(default)]
    pub b_shunt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcBranch {
    pub from: usize,
    pub to: usize,
    pub series_r: f64,
    pub series_x: f64,
    /// Total line charging susceptance.
    #[serde(default)]
    pub shunt_b: f64,
    /// Off-nominal turns ratio at the `from` side.
    #[serde(default = "one")]
    pub tap: f64,
    /// Phase shift in radians.
    #[serde(default)]
    pub shift: f64,
    /// Current magnitude bounds at both terminals; `None` means unrated.
    pub i_max_from: Option<f64>,
    pub i_max_to: Option<f64>,
    /// Range of the relative voltage drop `1 - |v_to| / |v_from|`.
    #[serde(default = "minus_one")]
    pub drop_lo: f64,
    #[serde(default = "one")]
    pub drop_hi: f64,
    /// Range of the voltage angle difference `angle(v_from) - angle(v_to)`.
    pub ang_lo: f64,
    pub ang_hi: f64,
    /// One-based branch rows of the source case that were merged into this branch.
    #[serde(default)]
    pub source_rows: Vec<usize>,
}

fn one() -> f64 {
    1.0
}

fn minus_one() -> f64 {
    -1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcBranch {
    pub from: usize,
    pub to: usize,
    /// Bounds on the flow sent from `from` towards `to`; negative values reverse it.
    pub p_min: f64,
    pub p_max: f64,
    pub loss_factor: f64,
    /// Converter reactive capability at each terminal.
    pub q_capability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub bus: usize,
    pub capability: Capability,
    pub cost: CostFn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub bus: usize,
    pub region: LoadRegion,
    #[serde(default)]
    pub benefit: BenefitFn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    #[serde(default)]
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub reference_bus: usize,
    pub ac_branches: Vec<AcBranch>,
    pub dc_branches: Vec<DcBranch>,
    pub generators: Vec<GenSpec>,
    pub loads: Vec<LoadSpec>,
}

/// Outcome of one invariant check in [`Grid::audit`].
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub failures: Vec<String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl AcBranch {
    /// Plain line between two buses with default ranges.
    pub fn line(from: usize, to: usize, r: f64, x: f64, b: f64) -> Self {
        AcBranch {
            from,
            to,
            series_r: r,
            series_x: x,
            shunt_b: b,
            tap: 1.0,
            shift: 0.0,
            i_max_from: None,
            i_max_to: None,
            drop_lo: -1.0,
            drop_hi: 1.0,
            ang_lo: -std::f64::consts::FRAC_PI_3,
            ang_hi: std::f64::consts::FRAC_PI_3,
            source_rows: Vec::new(),
        }
    }

    pub fn with_current_limit(mut self, i_max: f64) -> Self {
        self.i_max_from = Some(i_max);
        self.i_max_to = Some(i_max);
        self
    }

    pub fn is_transformer(&self) -> bool {
        self.tap != 1.0 || self.shift != 0.0
    }

    /// Current bounds with unrated terminals replaced by [`UNRATED_CURRENT`].
    pub fn current_bounds(&self) -> (f64, f64) {
        (
            self.i_max_from.unwrap_or(UNRATED_CURRENT),
            self.i_max_to.unwrap_or(UNRATED_CURRENT),
        )
    }
}

impl Grid {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Generators attached to each bus.
    pub fn gens_at(&self) -> Vec<Vec<usize>> {
        let mut at = vec![Vec::new(); self.n_buses()];
        for (g, gen) in self.generators.iter().enumerate() {
            at[gen.bus].push(g);
        }
        at
    }

    pub fn loads_at(&self) -> Vec<Vec<usize>> {
        let mut at = vec![Vec::new(); self.n_buses()];
        for (l, load) in self.loads.iter().enumerate() {
            at[load.bus].push(l);
        }
        at
    }

    /// Adjacency of the AC subgraph as (neighbour, branch) pairs.
    pub fn ac_adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n_buses()];
        for (k, br) in self.ac_branches.iter().enumerate() {
            adj[br.from].push((br.to, k));
            adj[br.to].push((br.from, k));
        }
        adj
    }

    /// Breadth-first order of the AC subgraph from the reference bus, as
    /// `(bus, parent branch)`. Buses not reached are absent.
    pub fn ac_bfs(&self) -> Vec<(usize, Option<usize>)> {
        let adj = self.ac_adjacency();
        let n = self.n_buses();
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::new();
        if self.reference_bus < n {
            seen[self.reference_bus] = true;
            queue.push_back((self.reference_bus, None));
        }
        while let Some((u, via)) = queue.pop_front() {
            order.push((u, via));
            for &(w, k) in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back((w, Some(k)));
                }
            }
        }
        order
    }

    pub fn ac_connected(&self) -> bool {
        self.ac_bfs().len() == self.n_buses()
    }

    /// True when the AC subgraph is a spanning tree.
    pub fn is_hybrid(&self) -> bool {
        self.n_buses() > 0 && self.ac_branches.len() + 1 == self.n_buses() && self.ac_connected()
    }

    /// Runs every structural invariant check and reports all of them.
    pub fn audit(&self) -> Vec<Check> {
        let n = self.n_buses();
        let mut checks = Vec::new();

        let mut f = Vec::new();
        if !(self.base_mva > 0.0 && self.base_mva.is_finite()) {
            f.push(format!("base_mva = {} is not positive", self.base_mva));
        }
        if n == 0 {
            f.push("grid has no buses".into());
        } else if self.reference_bus >= n {
            f.push(format!("reference bus {} out of range", self.reference_bus));
        }
        checks.push(Check {
            name: "system data",
            failures: f,
        });

        let mut f = Vec::new();
        for (i, b) in self.buses.iter().enumerate() {
            if !(b.v_min > 0.0 && b.v_min <= b.v_max && b.v_max.is_finite()) {
                f.push(format!("bus {i} (label {}): voltage bounds [{}, {}]", b.label, b.v_min, b.v_max));
            }
        }
        checks.push(Check {
            name: "voltage bounds",
            failures: f,
        });

        let mut f = Vec::new();
        for (k, br) in self.ac_branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                f.push(format!("AC branch {k}: references unknown bus ({} -> {})", br.from, br.to));
            } else if br.from == br.to {
                f.push(format!("AC branch {k}: self loop at bus {}", br.from));
            }
            if br.series_r < 0.0 {
                f.push(format!("AC branch {k}: negative resistance {}", br.series_r));
            }
            if br.series_r == 0.0 && br.series_x == 0.0 {
                f.push(format!("AC branch {k}: zero series impedance"));
            }
            if !(br.tap > 0.0) {
                f.push(format!("AC branch {k}: tap ratio {}", br.tap));
            }
            if !(br.ang_lo > -FRAC_PI_2 && br.ang_lo <= 0.0 && br.ang_hi >= 0.0 && br.ang_hi < FRAC_PI_2) {
                f.push(format!("AC branch {k}: angle range [{}, {}]", br.ang_lo, br.ang_hi));
            }
            if !(br.drop_lo >= -1.0 && br.drop_lo <= br.drop_hi) {
                f.push(format!("AC branch {k}: drop range [{}, {}]", br.drop_lo, br.drop_hi));
            }
            for lim in [br.i_max_from, br.i_max_to].into_iter().flatten() {
                if !(lim > 0.0) {
                    f.push(format!("AC branch {k}: current limit {lim}"));
                }
            }
        }
        checks.push(Check {
            name: "AC branches",
            failures: f,
        });

        let mut f = Vec::new();
        let mut pairs = std::collections::HashMap::new();
        for (k, br) in self.ac_branches.iter().enumerate() {
            let key = (br.from.min(br.to), br.from.max(br.to));
            if let Some(first) = pairs.insert(key, k) {
                f.push(format!("AC branches {first} and {k} are parallel"));
            }
        }
        checks.push(Check {
            name: "no parallel AC branches",
            failures: f,
        });

        let mut f = Vec::new();
        for (d, br) in self.dc_branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                f.push(format!("DC branch {d}: references unknown bus ({} -> {})", br.from, br.to));
            } else if br.from == br.to {
                f.push(format!("DC branch {d}: self loop"));
            }
            if !(br.p_min <= br.p_max) {
                f.push(format!("DC branch {d}: flow bounds [{}, {}]", br.p_min, br.p_max));
            }
            if !(0.0..1.0).contains(&br.loss_factor) {
                f.push(format!("DC branch {d}: loss factor {}", br.loss_factor));
            }
            if !(br.q_capability >= 0.0) {
                f.push(format!("DC branch {d}: reactive capability {}", br.q_capability));
            }
        }
        checks.push(Check {
            name: "DC branches",
            failures: f,
        });

        let mut f = Vec::new();
        for (g, gen) in self.generators.iter().enumerate() {
            if gen.bus >= n {
                f.push(format!("generator {g}: references unknown bus {}", gen.bus));
            }
            if let Err(e) = gen.capability.validate() {
                f.push(format!("generator {g}: {e}"));
            }
            if let Err(e) = gen.cost.validate() {
                f.push(format!("generator {g}: {e}"));
            }
        }
        for (l, load) in self.loads.iter().enumerate() {
            if load.bus >= n {
                f.push(format!("load {l}: references unknown bus {}", load.bus));
            }
            if let Err(e) = load.region.validate() {
                f.push(format!("load {l}: {e}"));
            }
            if let Err(e) = load.benefit.validate() {
                f.push(format!("load {l}: {e}"));
            }
        }
        checks.push(Check {
            name: "producers and consumers",
            failures: f,
        });

        let structural_ok = checks.iter().all(Check::passed);
        let mut f = Vec::new();
        if structural_ok && !self.ac_connected() {
            let reached: Vec<bool> = {
                let mut r = vec![false; n];
                for (b, _) in self.ac_bfs() {
                    r[b] = true;
                }
                r
            };
            let islanded: Vec<String> = (0..n).filter(|&b| !reached[b]).map(|b| b.to_string()).collect();
            f.push(format!("buses not AC-connected to the reference: {}", islanded.join(", ")));
        }
        checks.push(Check {
            name: "AC connectivity",
            failures: f,
        });
        checks
    }

    /// Fails with the first violated invariant.
    pub fn validate(&self) -> Result<()> {
        for check in self.audit() {
            if let Some(msg) = check.failures.first() {
                return Err(Error::InvalidGrid(format!("{}: {msg}", check.name)));
            }
        }
        Ok(())
    }

    /// Multiplies every load region by `factor`.
    pub fn scale_loads(&self, factor: f64) -> Grid {
        let mut g = self.clone();
        for load in &mut g.loads {
            load.region = load.region.scaled(factor);
        }
        g
    }

    /// Total fixed-or-minimum active demand in p.u.
    pub fn total_min_load(&self) -> f64 {
        self.loads.iter().map(|l| l.region.p_range().0).sum()
    }

    pub fn total_max_generation(&self) -> f64 {
        self.generators.iter().map(|g| g.capability.p_range().1).sum()
    }
}
