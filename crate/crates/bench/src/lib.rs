//! Fixtures shared by the benchmarks.

use gridlmp::casefile::{parse_json, parse_matpower, to_grid};
use gridlmp::grid::upgrade_to_hybrid;
use gridlmp::Grid;

pub fn wscc9() -> Grid {
    to_grid(&parse_matpower(include_str!("../../../data/wscc9.m")).expect("wscc9 parses")).expect("wscc9 converts")
}

pub fn wscc9_hybrid() -> Grid {
    upgrade_to_hybrid(&wscc9(), 0.035, 0.25).expect("upgrade succeeds").0
}

pub fn demo4_hybrid() -> Grid {
    parse_json(include_str!("../../../data/demo4_hybrid.json")).expect("demo4 parses")
}
