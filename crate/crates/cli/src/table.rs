//! Plain-text results table: P̄ and R per domain plus the average, one row
//! per arm, and an optional signed gain row.

use lich_core::domain::Domain;
use lich_core::metrics::{format_1, round_1, Aggregate};

const LABEL: usize = 10;
const CELL: usize = 7;

fn pad_left(s: &str, width: usize) -> String {
    let n = s.chars().filter(|c| !('\u{300}'..='\u{36f}').contains(c)).count();
    format!("{}{s}", " ".repeat(width.saturating_sub(n)))
}

fn cells(agg: &Aggregate) -> Vec<Option<(f64, f64)>> {
    let mut out: Vec<Option<(f64, f64)>> =
        Domain::ALL.iter().map(|d| agg.domain(*d).map(|s| (s.p_bar, s.r))).collect();
    out.push(Some((agg.macro_p_bar, agg.macro_r)));
    out
}

fn row(label: &str, values: &[Option<(f64, f64)>], fmt: impl Fn(f64) -> String) -> String {
    let mut line = format!("{label:<LABEL$}");
    for v in values {
        match v {
            Some((p, r)) => {
                line.push_str(&pad_left(&fmt(*p), CELL + 1));
                line.push_str(&pad_left(&fmt(*r), CELL));
            }
            None => {
                line.push_str(&pad_left("-", CELL + 1));
                line.push_str(&pad_left("-", CELL));
            }
        }
    }
    line.trim_end().to_string()
}

/// Difference of the displayed one-decimal values, signed.
fn signed(x: f64) -> String {
    let v = round_1(x);
    if v > 0.0 {
        format!("+{v:.1}")
    } else if v == 0.0 {
        "0.0".to_string()
    } else {
        format!("{v:.1}")
    }
}

pub fn render(rows: &[Aggregate], gain: Option<(&Aggregate, &Aggregate)>) -> String {
    let mut out = format!("{:<LABEL$}", "Method");
    for name in Domain::ALL.iter().map(|d| d.title()).chain(["Average"]) {
        out.push_str(&format!(" {name:<w$}", w = 2 * CELL));
    }
    let mut out = out.trim_end().to_string();
    out.push('\n');
    let mut sub = " ".repeat(LABEL);
    for _ in 0..=Domain::ALL.len() {
        sub.push_str(&pad_left("P̄", CELL + 1));
        sub.push_str(&pad_left("R", CELL));
    }
    out.push_str(&sub);
    out.push('\n');
    for agg in rows {
        out.push_str(&row(&agg.arm, &cells(agg), format_1));
        out.push('\n');
    }
    if let Some((from, to)) = gain {
        let diff: Vec<Option<(f64, f64)>> = cells(from)
            .into_iter()
            .zip(cells(to))
            .map(|(a, b)| match (a, b) {
                (Some((pa, ra)), Some((pb, rb))) => {
                    Some((round_1(pb) - round_1(pa), round_1(rb) - round_1(ra)))
                }
                _ => None,
            })
            .collect();
        out.push_str(&row("Gain", &diff, signed));
        out.push('\n');
    }
    out
}
