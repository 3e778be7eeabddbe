//! Report files derived from a results directory.

use std::fmt::Write as _;

use stackrace::sim::{CompetitionType, StrategyKind};
use stackrace::study::{mean_cost_curve, summarize, LoadedStudy, Table, COST_DISPLAY_SCALE};

/// `(step, mean stage costs, traces still running)` per step.
type Curve = Vec<(usize, [f64; 2], usize)>;

pub struct ReportFile {
    pub name: String,
    pub contents: String,
}

fn table_rows(out: &mut String, name: &str, table: &Table) {
    for (r, p2) in StrategyKind::ALL.iter().enumerate() {
        for (c, p1) in StrategyKind::ALL.iter().enumerate() {
            let cell = table.cells[r][c];
            let _ = writeln!(out, "{name},{},{},{:?},{:?},{}", p2.letter(), p1.letter(), cell.mean, cell.half_ci, cell.n);
        }
    }
    for (c, p1) in StrategyKind::ALL.iter().enumerate() {
        let _ = writeln!(out, "{name},average,{},{:?},,", p1.letter(), table.averages[c]);
    }
}

fn tables_csv(study: &LoadedStudy) -> String {
    let mut out = String::from("table,p2,p1,mean,half_ci,n\n");
    table_rows(&mut out, "steps", &study.results.steps_table);
    table_rows(&mut out, "cost_p1", &study.results.cost_table);
    out
}

fn curves(study: &LoadedStudy) -> Vec<(CompetitionType, Curve)> {
    study
        .stage_costs
        .iter()
        .map(|(cell, traces)| (*cell, mean_cost_curve(traces, study.manifest.horizon_steps)))
        .collect()
}

fn curves_csv(curves: &[(CompetitionType, Curve)]) -> String {
    let mut out = String::from("cell,step,p1_mean_cost,p2_mean_cost,running\n");
    for (cell, curve) in curves {
        for (k, m, live) in curve {
            let _ = writeln!(out, "{},{k},{:?},{:?},{live}", cell.label(), m[0], m[1]);
        }
    }
    out
}

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 300.0;
const MARGIN: f64 = 50.0;

/// Line plot of both players' mean stage cost per step.
pub fn svg_plot(cell: CompetitionType, curve: &[(usize, [f64; 2], usize)], horizon_steps: usize) -> String {
    let values = curve.iter().flat_map(|(_, m, _)| m.iter().map(|v| v * COST_DISPLAY_SCALE));
    let (lo, hi) = values.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let xs = |k: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * k as f64 / horizon_steps.max(2).saturating_sub(1) as f64;
    let ys = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v * COST_DISPLAY_SCALE - lo) / span;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}: mean stage cost (x100)</text>"#,
        WIDTH / 2.0,
        cell.label()
    );
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for (v, y) in [(lo, y0), (hi, y1)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.3}</text>"#,
            x0 - 4.0,
            y + 3.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">step</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    for (p, colour) in [(0, "#1f77b4"), (1, "#d62728")] {
        let points: Vec<String> = curve
            .iter()
            .map(|(k, m, _)| format!("{:.2},{:.2}", xs(*k), ys(m[p])))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{colour}">P{} ({:?})</text>"#,
            x1 - 90.0,
            40.0 + 14.0 * p as f64,
            p + 1,
            if p == 0 { cell.p1 } else { cell.p2 }
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Every report file, named relative to the report directory.
pub fn build(study: &LoadedStudy) -> Vec<ReportFile> {
    let curves = curves(study);
    let mut files = vec![
        ReportFile { name: "tables.txt".into(), contents: summarize(&study.results) },
        ReportFile { name: "tables.csv".into(), contents: tables_csv(study) },
        ReportFile { name: "curves.csv".into(), contents: curves_csv(&curves) },
    ];
    for (cell, curve) in &curves {
        files.push(ReportFile {
            name: format!("plots/{}.svg", cell.label()),
            contents: svg_plot(*cell, curve, study.manifest.horizon_steps),
        });
    }
    files
}
