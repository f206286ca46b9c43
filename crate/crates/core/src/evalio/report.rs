//! Report files: per-case CSV, summary JSON, per-curve CSV and an SVG plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{aggregate_report, CaseResult, DeletionCurve, ErfEstimate, Role, SummaryRow};

/// Column order of `cases.csv`.
pub const CASE_COLUMNS: [&str; 12] = [
    "model",
    "image_id",
    "prototype",
    "role",
    "method",
    "audc",
    "relevance_fraction",
    "irrelevant",
    "grid",
    "fill",
    "seed",
    "elapsed_ms",
];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::internal(format!("{}: {other:?}", path.display())),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn optional<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_default()
}

/// `cases.csv` rows in [`CASE_COLUMNS`] order.
pub fn case_records(cases: &[CaseResult]) -> Vec<Vec<String>> {
    cases
        .iter()
        .map(|c| {
            vec![
                c.model.clone(),
                c.image_id.clone(),
                c.prototype.to_string(),
                c.role.name().to_string(),
                c.method.clone(),
                optional(c.audc, |a| format!("{a:.1}")),
                optional(c.relevance, |r| format!("{:.6}", r.fraction)),
                optional(c.relevance, |r| r.irrelevant.to_string()),
                c.grid.clone(),
                c.fill.name().to_string(),
                c.seed.to_string(),
                optional(c.elapsed_ms, |t| format!("{t:.3}")),
            ]
        })
        .collect()
}

pub fn write_cases_csv(path: &Path, cases: &[CaseResult]) -> Result<()> {
    write_csv(path, &CASE_COLUMNS, &case_records(cases))
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary<'a, P: Serialize> {
    pub parameters: &'a P,
    pub rows: Vec<SummaryRow>,
}

/// Summary JSON with the run's parameters echoed first.
pub fn summary_json<P: Serialize>(parameters: &P, cases: &[CaseResult]) -> Result<String> {
    let summary = Summary {
        parameters,
        rows: aggregate_report(cases)?,
    };
    let mut s =
        serde_json::to_string_pretty(&summary).map_err(|e| Error::internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// A deletion curve with the role of its case.
#[derive(Debug, Clone)]
pub struct RoleCurve {
    pub model: String,
    pub role: Role,
    pub curve: DeletionCurve,
}

pub fn write_curves_csv(path: &Path, curves: &[RoleCurve]) -> Result<()> {
    let header = ["model", "image_id", "prototype", "role", "method", "a", "tau"];
    let rows: Vec<Vec<String>> = curves
        .iter()
        .flat_map(|rc| {
            let m = &rc.curve.metadata;
            rc.curve
                .areas
                .iter()
                .zip(&rc.curve.ratios)
                .map(move |(a, t)| {
                    vec![
                        rc.model.clone(),
                        m.image_id.clone(),
                        m.prototype.to_string(),
                        rc.role.name().to_string(),
                        m.method.clone(),
                        format!("{a:.4}"),
                        format!("{t:.6}"),
                    ]
                })
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn write_erf_csv(path: &Path, model: &str, estimates: &[(Role, ErfEstimate)]) -> Result<()> {
    let header = ["model", "image_id", "prototype", "role", "method", "erf_area", "threshold"];
    let rows: Vec<Vec<String>> = estimates
        .iter()
        .map(|(role, e)| {
            let m = &e.curve.metadata;
            vec![
                model.to_string(),
                m.image_id.clone(),
                m.prototype.to_string(),
                role.name().to_string(),
                m.method.clone(),
                optional(e.area, |a| format!("{a:.4}")),
                e.threshold.to_string(),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

/// Mean curve per method as SVG polylines: deletion area (%) against
/// similarity ratio.
pub fn curves_svg(curves: &[RoleCurve]) -> Result<String> {
    let mut by_method: BTreeMap<&str, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for rc in curves {
        let c = &rc.curve;
        let slot = by_method
            .entry(c.metadata.method.as_str())
            .or_insert_with(|| (c.areas.clone(), vec![0.0; c.ratios.len()], 0));
        if slot.0 != c.areas {
            return Err(Error::argument("curves of one method use different grids"));
        }
        for (s, t) in slot.1.iter_mut().zip(&c.ratios) {
            *s += t;
        }
        slot.2 += 1;
    }
    let a_max = by_method
        .values()
        .filter_map(|(a, ..)| a.last().copied())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let t_max = curves
        .iter()
        .flat_map(|rc| rc.curve.ratios.iter().copied())
        .fold(1.0f64, f64::max);
    let (w, h, m) = (480.0, 320.0, 48.0);
    let x = |a: f64| m + (w - 2.0 * m) * a / a_max;
    let y = |t: f64| h - m - (h - 2.0 * m) * t / t_max;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">deletion area (%)</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">similarity ratio</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (tick, label) in [(0.0, "0".to_string()), (a_max, format!("{}", a_max * 100.0))] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{label}</text>"#,
            x(tick),
            h - m + 14.0
        );
    }
    for (tick, label) in [(0.0, "0"), (1.0, "1")] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{label}</text>"#,
            m - 4.0,
            y(tick) + 3.0
        );
    }
    for (i, (method, (areas, sums, n))) in by_method.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = areas
            .iter()
            .zip(sums)
            .map(|(&a, &t)| format!("{:.2},{:.2}", x(a), y(t / *n as f64)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{method}</text>"#,
            w - m - 100.0,
            m + 14.0 * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `cases.csv` and `summary.json`; deletion curves add `curves.csv`
/// and `curves.svg`.
pub fn write_reports<P: Serialize>(
    out_dir: &Path,
    parameters: &P,
    cases: &[CaseResult],
    curves: &[RoleCurve],
) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::argument("no report rows to write"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_cases_csv(&out_dir.join("cases.csv"), cases)?;
    write_text(&out_dir.join("summary.json"), &summary_json(parameters, cases)?)?;
    if !curves.is_empty() {
        write_curves_csv(&out_dir.join("curves.csv"), curves)?;
        write_text(&out_dir.join("curves.svg"), &curves_svg(curves)?)?;
    }
    Ok(())
}
