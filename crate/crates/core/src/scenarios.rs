//! Seeded perturbation ensembles and uniform-load loadability sweeps.
//!
//! Randomness comes from ChaCha8 seeded with the ensemble seed, one stream
//! per scenario index, so any scenario can be regenerated on its own.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;

use crate::dcopf::solve_dcopf;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::pricing::{price, PricingConfig};
use crate::socr::solve_socr;

/// Environment variable capping the batch worker count.
pub const THREADS_ENV: &str = "GRIDLMP_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub n_scenarios: usize,
    pub load_scale_range: (f64, f64),
    pub cost_scale_range: (f64, f64),
}

impl ScenarioSpec {
    pub fn new(seed: u64, n_scenarios: usize) -> Self {
        ScenarioSpec {
            seed,
            n_scenarios,
            load_scale_range: (0.25, 1.25),
            cost_scale_range: (0.5, 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scenarios == 0 {
            return Err(Error::InvalidGrid("scenario count must be at least 1".into()));
        }
        for (name, (lo, hi)) in [("load", self.load_scale_range), ("cost", self.cost_scale_range)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::InvalidGrid(format!("{name} scale range ({lo}, {hi}) must be positive and ordered")));
            }
        }
        Ok(())
    }
}

/// Scale factors drawn for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioFactors {
    /// One factor per bus, applied to every load at that bus.
    pub load: Vec<f64>,
    /// One factor per generator, applied to its cost function.
    pub cost: Vec<f64>,
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Draws bus factors first, then generator factors, from the stream of
/// scenario `index`.
pub fn draw_factors(grid: &Grid, spec: &ScenarioSpec, index: usize) -> ScenarioFactors {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let load = (0..grid.n_buses()).map(|_| draw(&mut rng, spec.load_scale_range)).collect();
    let cost = (0..grid.generators.len()).map(|_| draw(&mut rng, spec.cost_scale_range)).collect();
    ScenarioFactors { load, cost }
}

pub fn apply_factors(grid: &Grid, factors: &ScenarioFactors) -> Grid {
    let mut out = grid.clone();
    for load in &mut out.loads {
        load.region = load.region.scaled(factors.load[load.bus]);
    }
    for (gen, f) in out.generators.iter_mut().zip(&factors.cost) {
        gen.cost = gen.cost.scaled(*f);
    }
    out
}

pub fn perturb(grid: &Grid, spec: &ScenarioSpec, index: usize) -> Grid {
    apply_factors(grid, &draw_factors(grid, spec, index))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRecord {
    pub index: usize,
    /// `optimal`, `infeasible` or a short failure description.
    pub status: String,
    pub exact: bool,
    pub kappa_mean: Option<f64>,
    pub kappa_max: Option<f64>,
    pub objective: Option<f64>,
    pub price_min: Option<f64>,
    pub price_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchResult {
    pub seed: u64,
    pub records: Vec<ScenarioRecord>,
    pub exactness_rate: f64,
}

impl BatchResult {
    /// One row per scenario: `scenario,status,exact,kappa_mean,kappa_max,objective`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
        let mut out = String::from("scenario,status,exact,kappa_mean,kappa_max,objective\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.index,
                r.status,
                r.exact,
                opt(r.kappa_mean),
                opt(r.kappa_max),
                opt(r.objective)
            );
        }
        out
    }
}

fn run_scenario(grid: &Grid, spec: &ScenarioSpec, cfg: &PricingConfig, index: usize) -> ScenarioRecord {
    let scenario = perturb(grid, spec, index);
    let empty = ScenarioRecord {
        index,
        status: String::new(),
        exact: false,
        kappa_mean: None,
        kappa_max: None,
        objective: None,
        price_min: None,
        price_max: None,
    };
    match price(&scenario, cfg) {
        Ok((_, report)) => ScenarioRecord {
            status: "optimal".into(),
            exact: report.exact,
            kappa_mean: Some(report.kappa_mean),
            kappa_max: Some(report.kappa_max),
            objective: Some(report.objective),
            price_min: report.dual_p.iter().copied().reduce(f64::min),
            price_max: report.dual_p.iter().copied().reduce(f64::max),
            ..empty
        },
        Err(Error::Infeasible) => ScenarioRecord {
            status: "infeasible".into(),
            ..empty
        },
        Err(e) => ScenarioRecord {
            status: format!("failed: {}", e.to_string().replace(',', ";")),
            ..empty
        },
    }
}

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Solves and certifies every scenario. Scenarios run in parallel; records
/// are ordered by index and failures are recorded rather than propagated.
pub fn run_batch(grid: &Grid, spec: &ScenarioSpec, cfg: &PricingConfig) -> Result<BatchResult> {
    spec.validate()?;
    grid.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::SolverFailure(e.to_string()))?;
    let records: Vec<ScenarioRecord> = pool.install(|| {
        (0..spec.n_scenarios)
            .into_par_iter()
            .map(|i| run_scenario(grid, spec, cfg, i))
            .collect()
    });
    let exact = records.iter().filter(|r| r.exact).count();
    Ok(BatchResult {
        seed: spec.seed,
        exactness_rate: exact as f64 / spec.n_scenarios as f64,
        records,
    })
}

/// Model used to decide feasibility in a loadability sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepModel {
    Relaxation,
    Linearized,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub scale: f64,
    pub feasible: bool,
    /// Active-power price range in $/MWh at feasible points.
    pub price_min: Option<f64>,
    pub price_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Loadability {
    /// Largest load scale found feasible.
    pub max_scale: f64,
    /// Smallest load scale found infeasible; `None` if the search never hit one.
    pub infeasible_scale: Option<f64>,
    /// Every evaluated scale in evaluation order.
    pub points: Vec<SweepPoint>,
}

fn evaluate(grid: &Grid, model: SweepModel, scale: f64, tol: f64) -> SweepPoint {
    let scaled = grid.scale_loads(scale);
    let prices = match model {
        SweepModel::Relaxation => solve_socr(&scaled, tol).map(|s| s.lmp().into_iter().map(|l| l[0]).collect::<Vec<_>>()),
        SweepModel::Linearized => solve_dcopf(&scaled).map(|s| s.lmp),
    };
    match prices {
        Ok(p) => SweepPoint {
            scale,
            feasible: true,
            price_min: p.iter().copied().reduce(f64::min),
            price_max: p.iter().copied().reduce(f64::max),
        },
        Err(e) => {
            if !matches!(e, Error::Infeasible) {
                log::warn!("load scale {scale}: {e}; treated as infeasible");
            }
            SweepPoint {
                scale,
                feasible: false,
                price_min: None,
                price_max: None,
            }
        }
    }
}

/// Largest uniform load scale that stays feasible, bracketed to `step`.
/// The scale doubles from 1 until infeasible (at most `max_iter` times),
/// then bisects.
pub fn loadability_sweep(grid: &Grid, model: SweepModel, step: f64, max_iter: usize, tol: f64) -> Result<Loadability> {
    if !(step > 0.0) {
        return Err(Error::InvalidGrid(format!("sweep step {step} must be positive")));
    }
    let mut points = Vec::new();
    let base = evaluate(grid, model, 1.0, tol);
    let base_ok = base.feasible;
    points.push(base);
    if !base_ok {
        return Err(Error::BaseInfeasible);
    }
    let mut lo = 1.0;
    let mut hi = None;
    for _ in 0..max_iter {
        let p = evaluate(grid, model, 2.0 * lo, tol);
        let ok = p.feasible;
        let scale = p.scale;
        points.push(p);
        if ok {
            lo = scale;
        } else {
            hi = Some(scale);
            break;
        }
    }
    if let Some(mut h) = hi {
        while h - lo > step {
            let p = evaluate(grid, model, 0.5 * (lo + h), tol);
            if p.feasible {
                lo = p.scale;
            } else {
                h = p.scale;
            }
            points.push(p);
        }
        hi = Some(h);
    }
    Ok(Loadability {
        max_scale: lo,
        infeasible_scale: hi,
        points,
    })
}
