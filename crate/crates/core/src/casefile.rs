//! MATPOWER case import and the native JSON grid format.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::{AcBranch, BenefitFn, Bus, Capability, CostFn, GenSpec, Grid, LoadRegion, LoadSpec};

pub const SCHEMA_VERSION: u64 = 1;

/// Angle-difference bound substituted for unbounded or degenerate case data.
pub const DEFAULT_ANGLE_LIMIT_DEG: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRow {
    pub id: usize,
    pub bus_type: u8,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vmax: f64,
    pub vmin: f64,
    pub base_kv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRow {
    pub bus: usize,
    pub pmax: f64,
    pub pmin: f64,
    pub qmax: f64,
    pub qmin: f64,
    pub status: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRow {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b: f64,
    pub rate_a: f64,
    pub tap: f64,
    /// Degrees.
    pub shift: f64,
    pub status: f64,
    /// Degrees.
    pub angmin: f64,
    pub angmax: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GencostRow {
    pub model: u8,
    pub startup: f64,
    pub shutdown: f64,
    pub n: usize,
    pub coefficients: Vec<f64>,
}

/// The five MATPOWER tables, in file units (MW, MVAr, degrees).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCase {
    pub base_mva: f64,
    pub bus_table: Vec<BusRow>,
    pub gen_table: Vec<GenRow>,
    pub branch_table: Vec<BranchRow>,
    pub gencost_table: Vec<GencostRow>,
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

/// Locates `name = ...` where `name` is optionally prefixed by `mpc.`.
fn assignment<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let t = line.trim_start();
    let t = t.strip_prefix("mpc.").unwrap_or(t);
    let rest = t.strip_prefix(name)?;
    let rest = rest.trim_start();
    rest.strip_prefix('=').map(str::trim_start)
}

fn assigned_name(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let t = t.strip_prefix("mpc.")?;
    let end = t.find(|c: char| !(c.is_alphanumeric() || c == '_'))?;
    t[end..].trim_start().starts_with('=').then(|| &t[..end])
}

fn parse_number(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::MalformedRow {
        line,
        reason: format!("not a number: `{tok}`"),
    })
}

/// Reads the rows of a `name = [ ... ];` matrix. Rows are tagged with the
/// line they start on.
fn matrix(lines: &[&str], name: &str) -> Result<Option<Vec<(usize, Vec<f64>)>>> {
    let Some(start) = lines.iter().position(|l| assignment(l, name).is_some_and(|r| r.starts_with('['))) else {
        return Ok(None);
    };
    let mut rows = Vec::new();
    let mut current: Vec<f64> = Vec::new();
    let mut current_line = start + 1;
    for (idx, raw) in lines.iter().enumerate().skip(start) {
        let mut text = *raw;
        if idx == start {
            let after = assignment(text, name).unwrap_or("");
            text = &after[1..];
        }
        let (body, closed) = match text.find(']') {
            Some(i) => (&text[..i], true),
            None => (text, false),
        };
        for (p, piece) in body.split(';').enumerate() {
            if p > 0 && !current.is_empty() {
                rows.push((current_line, std::mem::take(&mut current)));
            }
            for tok in piece.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
                if current.is_empty() {
                    current_line = idx + 1;
                }
                current.push(parse_number(tok, idx + 1)?);
            }
        }
        // a newline also ends a row
        if !current.is_empty() {
            rows.push((current_line, std::mem::take(&mut current)));
        }
        if closed {
            return Ok(Some(rows));
        }
    }
    Err(Error::MalformedRow {
        line: start + 1,
        reason: format!("matrix `{name}` is not closed"),
    })
}

fn need(row: &[f64], n: usize, line: usize, what: &str) -> Result<()> {
    if row.len() < n {
        return Err(Error::MalformedRow {
            line,
            reason: format!("{what} row has {} columns, expected at least {n}", row.len()),
        });
    }
    Ok(())
}

fn as_index(v: f64, line: usize) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::MalformedRow {
            line,
            reason: format!("expected a nonnegative integer, found {v}"),
        })
    }
}

/// Parses a MATPOWER case and returns it with a list of warnings about
/// ignored content.
pub fn parse_matpower_with_warnings(text: &str) -> Result<(RawCase, Vec<String>)> {
    let lines: Vec<&str> = text.lines().map(strip_comment).collect();
    let mut warnings = Vec::new();

    let base_mva = lines
        .iter()
        .enumerate()
        .find_map(|(i, l)| assignment(l, "baseMVA").map(|r| (i, r)))
        .ok_or_else(|| Error::MissingTable("baseMVA".into()))
        .and_then(|(i, r)| parse_number(r.trim_end().trim_end_matches(';').trim(), i + 1))?;

    let table = |name: &str| matrix(&lines, name)?.ok_or_else(|| Error::MissingTable(name.into()));
    let bus_raw = table("bus")?;
    let gen_raw = table("gen")?;
    let branch_raw = table("branch")?;
    let gencost_raw = table("gencost")?;

    for l in &lines {
        if let Some(name) = assigned_name(l) {
            if !matches!(name, "version" | "baseMVA" | "bus" | "gen" | "branch" | "gencost") {
                warnings.push(format!("ignoring unsupported field `mpc.{name}`"));
            }
        }
    }

    let mut bus_table = Vec::with_capacity(bus_raw.len());
    for (line, r) in &bus_raw {
        need(r, 13, *line, "bus")?;
        bus_table.push(BusRow {
            id: as_index(r[0], *line)?,
            bus_type: as_index(r[1], *line)? as u8,
            pd: r[2],
            qd: r[3],
            gs: r[4],
            bs: r[5],
            base_kv: r[9],
            vmax: r[11],
            vmin: r[12],
        });
    }
    let mut gen_table = Vec::with_capacity(gen_raw.len());
    for (line, r) in &gen_raw {
        need(r, 10, *line, "gen")?;
        gen_table.push(GenRow {
            bus: as_index(r[0], *line)?,
            qmax: r[3],
            qmin: r[4],
            status: r[7],
            pmax: r[8],
            pmin: r[9],
        });
    }
    let mut branch_table = Vec::with_capacity(branch_raw.len());
    for (line, r) in &branch_raw {
        need(r, 11, *line, "branch")?;
        branch_table.push(BranchRow {
            from: as_index(r[0], *line)?,
            to: as_index(r[1], *line)?,
            r: r[2],
            x: r[3],
            b: r[4],
            rate_a: r[5],
            tap: r[8],
            shift: r[9],
            status: r[10],
            angmin: r.get(11).copied().unwrap_or(-360.0),
            angmax: r.get(12).copied().unwrap_or(360.0),
        });
    }
    let mut gencost_table = Vec::with_capacity(gencost_raw.len());
    for (row, (line, r)) in gencost_raw.iter().enumerate() {
        need(r, 4, *line, "gencost")?;
        let model = as_index(r[0], *line)?;
        let n = as_index(r[3], *line)?;
        let width = match model {
            1 => 2 * n,
            2 if n <= 3 => n,
            _ => {
                return Err(Error::UnsupportedCostModel {
                    row: row + 1,
                    model: if model == 2 {
                        format!("polynomial of degree {}", n.saturating_sub(1))
                    } else {
                        model.to_string()
                    },
                })
            }
        };
        need(r, 4 + width, *line, "gencost")?;
        gencost_table.push(GencostRow {
            model: model as u8,
            startup: r[1],
            shutdown: r[2],
            n,
            coefficients: r[4..4 + width].to_vec(),
        });
    }
    if gencost_table.len() == 2 * gen_table.len() && !gen_table.is_empty() {
        warnings.push("ignoring reactive-power cost rows".into());
        gencost_table.truncate(gen_table.len());
    }

    let case = RawCase {
        base_mva,
        bus_table,
        gen_table,
        branch_table,
        gencost_table,
    };
    case.check()?;
    Ok((case, warnings))
}

pub fn parse_matpower(text: &str) -> Result<RawCase> {
    let (case, warnings) = parse_matpower_with_warnings(text)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(case)
}

impl RawCase {
    /// Checks the cross-table invariants.
    pub fn check(&self) -> Result<()> {
        if !(self.base_mva > 0.0) {
            return Err(Error::InvalidCase(format!("baseMVA = {} must be positive", self.base_mva)));
        }
        let mut ids = HashMap::new();
        for (i, b) in self.bus_table.iter().enumerate() {
            if ids.insert(b.id, i).is_some() {
                return Err(Error::InvalidCase(format!("duplicate bus id {}", b.id)));
            }
        }
        for (i, g) in self.gen_table.iter().enumerate() {
            if !ids.contains_key(&g.bus) {
                return Err(Error::InvalidCase(format!("gen row {} references unknown bus {}", i + 1, g.bus)));
            }
        }
        for (i, br) in self.branch_table.iter().enumerate() {
            for bus in [br.from, br.to] {
                if !ids.contains_key(&bus) {
                    return Err(Error::InvalidCase(format!("branch row {} references unknown bus {bus}", i + 1)));
                }
            }
        }
        if self.gencost_table.len() != self.gen_table.len() {
            return Err(Error::InvalidCase(format!(
                "{} gencost rows for {} generators",
                self.gencost_table.len(),
                self.gen_table.len()
            )));
        }
        Ok(())
    }

    /// Multiplies every load and generator limit by `alpha`.
    pub fn scale_all_powers(&self, alpha: f64) -> RawCase {
        let mut c = self.clone();
        for b in &mut c.bus_table {
            b.pd *= alpha;
            b.qd *= alpha;
        }
        for g in &mut c.gen_table {
            g.pmax *= alpha;
            g.pmin *= alpha;
            g.qmax *= alpha;
            g.qmin *= alpha;
        }
        c
    }
}

fn angle_limit(deg: f64, sign: f64) -> f64 {
    let deg = if deg == 0.0 || deg.abs() >= 90.0 {
        sign * DEFAULT_ANGLE_LIMIT_DEG
    } else {
        deg
    };
    deg.to_radians()
}

fn cost_from_row(row: &GencostRow, base: f64) -> CostFn {
    let c = &row.coefficients;
    match row.model {
        1 => CostFn::PiecewiseLinear {
            points: c.chunks(2).map(|p| [p[0] / base, p[1]]).collect(),
        },
        _ => {
            let mut coef = [0.0; 3];
            // coefficients are listed from the highest degree down to c0
            for (slot, v) in coef.iter_mut().rev().zip(c.iter().rev()) {
                *slot = *v;
            }
            CostFn::Quadratic {
                c2: coef[0] * base * base,
                c1: coef[1] * base,
                c0: coef[2],
            }
        }
    }
}

/// Converts raw case tables into a per-unit grid.
pub fn to_grid(case: &RawCase) -> Result<Grid> {
    case.check()?;
    let base = case.base_mva;
    let mut index = HashMap::new();
    let mut buses = Vec::new();
    let mut reference = None;
    for row in &case.bus_table {
        if row.bus_type == 4 {
            continue;
        }
        if row.bus_type == 3 && reference.is_none() {
            reference = Some(buses.len());
        }
        index.insert(row.id, buses.len());
        buses.push(Bus {
            label: row.id,
            v_min: row.vmin,
            v_max: row.vmax,
            g_shunt: row.gs / base,
            b_shunt: row.bs / base,
        });
    }

    let mut ac_branches = Vec::new();
    for (k, row) in case.branch_table.iter().enumerate() {
        let (Some(&from), Some(&to)) = (index.get(&row.from), index.get(&row.to)) else {
            continue;
        };
        if row.status <= 0.0 {
            continue;
        }
        if row.r < 0.0 {
            return Err(Error::NegativeResistance(k + 1));
        }
        let limit = (row.rate_a > 0.0).then(|| row.rate_a / base);
        let mut ang_lo = angle_limit(row.angmin, -1.0);
        let mut ang_hi = angle_limit(row.angmax, 1.0);
        if ang_lo > 0.0 || ang_hi < 0.0 {
            log::warn!("branch row {}: angle range excludes zero, widened to contain it", k + 1);
            ang_lo = ang_lo.min(0.0);
            ang_hi = ang_hi.max(0.0);
        }
        ac_branches.push(AcBranch {
            from,
            to,
            series_r: row.r,
            series_x: row.x,
            shunt_b: row.b,
            tap: if row.tap == 0.0 { 1.0 } else { row.tap },
            shift: row.shift.to_radians(),
            i_max_from: limit,
            i_max_to: limit,
            drop_lo: -1.0,
            drop_hi: 1.0,
            ang_lo,
            ang_hi,
            source_rows: vec![k + 1],
        });
    }

    let mut generators = Vec::new();
    for (g, row) in case.gen_table.iter().enumerate() {
        let Some(&bus) = index.get(&row.bus) else { continue };
        if row.status <= 0.0 {
            continue;
        }
        generators.push(GenSpec {
            bus,
            capability: Capability::Box {
                p_min: row.pmin / base,
                p_max: row.pmax / base,
                q_min: row.qmin / base,
                q_max: row.qmax / base,
            },
            cost: cost_from_row(&case.gencost_table[g], base),
        });
    }

    let loads = case
        .bus_table
        .iter()
        .filter(|r| r.bus_type != 4 && (r.pd != 0.0 || r.qd != 0.0))
        .map(|r| LoadSpec {
            bus: index[&r.id],
            region: LoadRegion::Fixed {
                p: r.pd / base,
                q: r.qd / base,
            },
            benefit: BenefitFn::Zero,
        })
        .collect();

    let reference_bus = reference.or_else(|| generators.first().map(|g| g.bus)).unwrap_or(0);
    let grid = Grid {
        name: String::new(),
        base_mva: base,
        buses,
        reference_bus,
        ac_branches,
        dc_branches: Vec::new(),
        generators,
        loads,
    };
    let reached = grid.ac_bfs();
    if reached.len() < grid.n_buses() {
        let mut seen = vec![false; grid.n_buses()];
        for (b, _) in reached {
            seen[b] = true;
        }
        let first = seen.iter().position(|s| !s).unwrap_or(0);
        return Err(Error::IslandedBus(grid.buses[first].label));
    }
    Ok(grid)
}

#[derive(Serialize)]
struct Document<'a> {
    schema: u64,
    #[serde(flatten)]
    grid: &'a Grid,
}

/// Serializes a grid in the versioned native format.
pub fn emit_json(grid: &Grid) -> String {
    serde_json::to_string_pretty(&Document {
        schema: SCHEMA_VERSION,
        grid,
    })
    .expect("grid serialization is infallible")
}

/// Collects paths present in `input` but absent from `known`.
fn unknown_fields(input: &Value, known: &Value, path: &str, out: &mut Vec<String>) {
    match (input, known) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in a {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get(k) {
                    Some(kv) => unknown_fields(v, kv, &p, out),
                    None => out.push(p),
                }
            }
        }
        (Value::Array(a), Value::Array(b)) => {
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                unknown_fields(x, y, &format!("{path}[{i}]"), out);
            }
        }
        _ => {}
    }
}

/// Parses the native format, returning the grid and warnings about ignored fields.
pub fn parse_json_with_warnings(text: &str) -> Result<(Grid, Vec<String>)> {
    let mut value: Value = serde_json::from_str(text)?;
    let found = value.get("schema").and_then(Value::as_u64).unwrap_or(0);
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaVersionMismatch {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    if let Value::Object(map) = &mut value {
        map.remove("schema");
    }
    let grid: Grid = serde_json::from_value(value.clone())?;
    let mut extra = Vec::new();
    unknown_fields(&value, &serde_json::to_value(&grid)?, "", &mut extra);
    let warnings = extra.into_iter().map(|p| format!("ignoring unknown field `{p}`")).collect();
    Ok((grid, warnings))
}

pub fn parse_json(text: &str) -> Result<Grid> {
    let (grid, warnings) = parse_json_with_warnings(text)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = r#"
function mpc = two
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	1	100	20	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1	100	1	250	10	0	0	0	0	0	0	0	0	0	0	0;
];
mpc.branch = [
	1	2	0.01	0.1	0.02	150	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.01	40	0;
];
"#;

    #[test]
    fn parses_minimal_case() {
        let c = parse_matpower(TWO_BUS).unwrap();
        assert_eq!(c.base_mva, 100.0);
        assert_eq!(c.bus_table.len(), 2);
        assert_eq!(c.branch_table.len(), 1);
        assert_eq!(c.gen_table[0].pmax, 250.0);
        assert_eq!(c.gencost_table[0].coefficients, vec![0.01, 40.0, 0.0]);
    }

    #[test]
    fn comment_lines_are_transparent() {
        let commented = TWO_BUS.replace("mpc.bus = [\n", "mpc.bus = [\n% bus data\n");
        assert_eq!(parse_matpower(&commented).unwrap(), parse_matpower(TWO_BUS).unwrap());
    }

    #[test]
    fn missing_table_reported() {
        let text = TWO_BUS.replace("mpc.gencost", "mpc.other");
        assert_eq!(parse_matpower(&text), Err(Error::MissingTable("gencost".into())));
    }

    #[test]
    fn cubic_cost_rejected() {
        let text = TWO_BUS.replace("2	0	0	3	0.01	40	0;", "2	0	0	4	1	0.01	40	0;");
        assert!(matches!(parse_matpower(&text), Err(Error::UnsupportedCostModel { .. })));
        let text = TWO_BUS.replace("2	0	0	3	0.01	40	0;", "3	0	0	1	1;");
        assert!(matches!(parse_matpower(&text), Err(Error::UnsupportedCostModel { .. })));
    }

    #[test]
    fn per_unit_conversion() {
        let g = to_grid(&parse_matpower(TWO_BUS).unwrap()).unwrap();
        assert_eq!(g.loads[0].region, LoadRegion::Fixed { p: 1.0, q: 0.2 });
        assert_eq!(g.ac_branches[0].i_max_from, Some(1.5));
        // marginal cost at zero output, converted back to $/MWh
        let (d, _) = g.generators[0].cost.derivative_interval(0.0);
        assert!((d / g.base_mva - 40.0).abs() < 1e-12);
        assert!((g.ac_branches[0].ang_hi - 60f64.to_radians()).abs() < 1e-15);
    }

    #[test]
    fn unknown_json_field_is_ignored_with_warning() {
        let g = to_grid(&parse_matpower(TWO_BUS).unwrap()).unwrap();
        let text = emit_json(&g).replacen("\"base_mva\"", "\"colour\": \"red\",\n  \"base_mva\"", 1);
        let (back, warnings) = parse_json_with_warnings(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("colour"));
    }

    #[test]
    fn schema_version_checked() {
        let g = to_grid(&parse_matpower(TWO_BUS).unwrap()).unwrap();
        let text = emit_json(&g).replace("\"schema\": 1", "\"schema\": 2");
        assert_eq!(
            parse_json(&text),
            Err(Error::SchemaVersionMismatch { found: 2, expected: 1 })
        );
        assert!(emit_json(&g).contains("\"dc_branches\": []"));
    }
}
