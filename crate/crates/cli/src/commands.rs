use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use gridlmp::casefile::{self, SCHEMA_VERSION};
use gridlmp::conic::DEFAULT_TOL;
use gridlmp::dcopf::{solve_dcopf_with, DCOPF_TOL};
use gridlmp::grid::{merge_parallel_branches, upgrade_to_hybrid};
use gridlmp::pricing::lmp_table;
use gridlmp::scenarios::{loadability_sweep, run_batch, ScenarioSpec, SweepModel};
use gridlmp::{Error, Grid, PricingConfig};

use crate::{Command, Common, Format, Model, PricingArgs, UpgradeArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_INEXACT: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;

/// Every JSON artifact carries the schema version and the producing subcommand.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: u64,
    command: &'a str,
    input: &'a str,
    result: &'a T,
}

#[derive(Serialize)]
struct LmpRow {
    bus_id: usize,
    lmp_p: f64,
    lmp_q: f64,
    v_mag: f64,
    v_ang: f64,
}

pub fn run(command: Command) -> Result<u8> {
    match command {
        Command::Validate(c) => validate(&c),
        Command::Upgrade { common, upgrade } => upgrade_cmd(&common, &upgrade),
        Command::Price { common, pricing } => price(&common, &pricing),
        Command::Dcopf(c) => dcopf(&c),
        Command::Perturb { common, pricing, n } => perturb(&common, &pricing, n),
        Command::Sweep {
            common,
            step,
            max_iter,
            model,
        } => sweep(&common, step, max_iter, model),
    }
}

fn format_of(c: &Common) -> Format {
    c.format.unwrap_or_else(|| match c.input.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
        _ => Format::Matpower,
    })
}

fn read_grid(c: &Common) -> Result<Grid> {
    let text = fs::read_to_string(&c.input).with_context(|| format!("reading {}", c.input.display()))?;
    let (mut grid, warnings) = match format_of(c) {
        Format::Json => casefile::parse_json_with_warnings(&text)?,
        Format::Matpower => {
            let (raw, warnings) = casefile::parse_matpower_with_warnings(&text)?;
            // MATPOWER cases routinely list double circuits as separate rows
            (merge_parallel_branches(&casefile::to_grid(&raw)?)?, warnings)
        }
    };
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if grid.name.is_empty() {
        grid.name = stem(&c.input);
    }
    Ok(grid)
}

fn tol(c: &Common, default: f64) -> Result<f64> {
    let t = c.tol.unwrap_or(default);
    if !(t > 0.0) {
        bail!("--tol must be positive, got {t}");
    }
    Ok(t)
}

fn load_checked(c: &Common) -> Result<Grid> {
    let grid = read_grid(c)?;
    grid.validate()?;
    Ok(grid)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "grid".into())
}

fn out_path(c: &Common, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(c.out.join(name))
}

fn write_json<T: Serialize>(c: &Common, name: &str, command: &str, result: &T) -> Result<PathBuf> {
    let path = out_path(c, name)?;
    let input = c.input.to_string_lossy();
    let doc = Envelope {
        schema: SCHEMA_VERSION,
        command,
        input: &input,
        result,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_csv<T: Serialize>(c: &Common, name: &str, rows: &[T]) -> Result<PathBuf> {
    let path = out_path(c, name)?;
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(path)
}

fn pricing_config(c: &Common, p: &PricingArgs) -> Result<PricingConfig> {
    if !(p.exact_tol > 0.0 && p.margin_tol > 0.0) {
        bail!("tolerances must be positive");
    }
    Ok(PricingConfig {
        solver_tol: tol(c, DEFAULT_TOL)?,
        exact_tol: p.exact_tol,
        margin_tol: p.margin_tol,
        ..PricingConfig::default()
    })
}

fn validate(c: &Common) -> Result<u8> {
    let grid = match read_grid(c) {
        Ok(g) => g,
        Err(e) => {
            println!("FAIL parse: {e:#}");
            return Ok(EXIT_INVALID);
        }
    };
    println!("PASS parse");
    let mut ok = true;
    for check in grid.audit() {
        if check.passed() {
            println!("PASS {}", check.name);
        } else {
            ok = false;
            for f in &check.failures {
                println!("FAIL {}: {f}", check.name);
            }
        }
    }
    println!(
        "{} buses, {} AC branches, {} DC branches, {} generators, {} loads, hybrid {}",
        grid.n_buses(),
        grid.ac_branches.len(),
        grid.dc_branches.len(),
        grid.generators.len(),
        grid.loads.len(),
        grid.is_hybrid()
    );
    Ok(if ok { EXIT_OK } else { EXIT_INVALID })
}

fn upgrade_cmd(c: &Common, u: &UpgradeArgs) -> Result<u8> {
    let grid = load_checked(c)?;
    let (hybrid, summary) = upgrade_to_hybrid(&grid, u.loss_factor, u.q_cap_fraction)?;
    let grid_path = out_path(c, &format!("{}_hybrid.json", stem(&c.input)))?;
    let mut text = casefile::emit_json(&hybrid);
    text.push('\n');
    fs::write(&grid_path, text).with_context(|| format!("writing {}", grid_path.display()))?;
    write_json(c, "upgrade.json", "upgrade", &summary)?;
    println!(
        "converted {} of {} AC branches ({:.2}%), total DC capacity {:.4} p.u.",
        summary.converted.len(),
        summary.ac_before,
        100.0 * summary.fraction,
        summary.total_dc_capacity
    );
    println!("hybrid grid written to {}", grid_path.display());
    Ok(EXIT_OK)
}

fn price(c: &Common, p: &PricingArgs) -> Result<u8> {
    let grid = load_checked(c)?;
    let cfg = pricing_config(c, p)?;
    let report = match gridlmp::price(&grid, &cfg) {
        Ok((_, report)) => report,
        Err(Error::Infeasible) => {
            println!("infeasible: no operating point satisfies the network constraints");
            return Ok(EXIT_INFEASIBLE);
        }
        Err(e) => return Err(e.into()),
    };
    write_json(c, "report.json", "price", &report)?;
    println!(
        "welfare {:.6} $/h, duality gap {:.3e}, kappa mean {:.3e}, kappa max {:.3e}",
        report.objective, report.duality_gap, report.kappa_mean, report.kappa_max
    );
    match lmp_table(&report) {
        Some(rows) => {
            let rows: Vec<LmpRow> = rows
                .into_iter()
                .map(|(bus_id, lmp_p, lmp_q, v_mag, v_ang)| LmpRow {
                    bus_id,
                    lmp_p,
                    lmp_q,
                    v_mag,
                    v_ang,
                })
                .collect();
            let path = write_csv(c, "lmp.csv", &rows)?;
            println!("exact: {} LMPs written to {}", rows.len(), path.display());
            Ok(EXIT_OK)
        }
        None => {
            println!("inexact: kappa max {:.3e}, duals are not valid prices", report.kappa_max);
            if !report.pathological_branches.is_empty() {
                println!("pathological branches {:?}", report.pathological_branches);
            }
            Ok(EXIT_INEXACT)
        }
    }
}

fn dcopf(c: &Common) -> Result<u8> {
    let grid = load_checked(c)?;
    let sol = match solve_dcopf_with(&grid, tol(c, DCOPF_TOL)?) {
        Ok(s) => s,
        Err(Error::Infeasible) => {
            println!("infeasible: no dispatch satisfies the linearized network");
            return Ok(EXIT_INFEASIBLE);
        }
        Err(e) => return Err(e.into()),
    };
    // the linearization has no reactive price and fixes magnitudes at 1 p.u.
    let rows: Vec<LmpRow> = grid
        .buses
        .iter()
        .zip(sol.lmp.iter().zip(&sol.theta))
        .map(|(bus, (&lmp_p, &v_ang))| LmpRow {
            bus_id: bus.label,
            lmp_p,
            lmp_q: 0.0,
            v_mag: 1.0,
            v_ang,
        })
        .collect();
    write_json(c, "dcopf.json", "dcopf", &sol)?;
    let path = write_csv(c, "dcopf_lmp.csv", &rows)?;
    println!("welfare {:.6} $/h, {} LMPs written to {}", sol.objective, rows.len(), path.display());
    Ok(EXIT_OK)
}

fn perturb(c: &Common, p: &PricingArgs, n: usize) -> Result<u8> {
    let grid = load_checked(c)?;
    let cfg = pricing_config(c, p)?;
    let spec = ScenarioSpec::new(c.seed, n);
    let batch = run_batch(&grid, &spec, &cfg)?;
    let path = out_path(c, "batch.csv")?;
    fs::write(&path, batch.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    write_json(c, "batch.json", "perturb", &batch)?;
    println!(
        "{} scenarios, seed {}, exactness rate {:.4}; records in {}",
        batch.records.len(),
        batch.seed,
        batch.exactness_rate,
        path.display()
    );
    Ok(EXIT_OK)
}

fn sweep(c: &Common, step: f64, max_iter: usize, model: Model) -> Result<u8> {
    let grid = load_checked(c)?;
    let model = match model {
        Model::Relaxation => SweepModel::Relaxation,
        Model::Linearized => SweepModel::Linearized,
    };
    let result = loadability_sweep(&grid, model, step, max_iter, tol(c, DEFAULT_TOL)?)?;
    write_csv(c, "sweep.csv", &result.points)?;
    write_json(c, "sweep.json", "sweep", &result)?;
    match result.infeasible_scale {
        Some(hi) => println!("feasible at scale {:.6}, infeasible at {:.6}", result.max_scale, hi),
        None => println!("feasible at scale {:.6}, no infeasible scale found", result.max_scale),
    }
    Ok(EXIT_OK)
}
