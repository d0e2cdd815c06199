//! Self-contained SVG bar charts of budget priors.

use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PALETTE: [&str; 8] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

/// One row of a `posterior_<model>.csv` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRow {
    pub subpop: usize,
    pub budget: f64,
    pub probability: f64,
}

pub fn read_posterior_csv(input: impl Read) -> Result<Vec<PosteriorRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Data { record: i, msg: e.to_string() }))
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped bars: one group per category, one bar per series. Values are
/// drawn on a 0..1 axis unless some exceed 1.
pub fn bar_chart_svg(title: &str, categories: &[String], series: &[Series]) -> String {
    let y_max = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite()).fold(1.0, f64::max);
    let bar_w = 8.0;
    let group_w = (bar_w * series.len().max(1) as f64 + 6.0).max(22.0);
    let (left, right, top, bottom) = (48.0, 130.0, 36.0, 44.0);
    let plot_h = 220.0;
    let width = left + right + group_w * categories.len().max(1) as f64;
    let height = top + plot_h + bottom;
    let y = |v: f64| top + plot_h * (1.0 - (v / y_max).clamp(0.0, 1.0));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" font-size="14">{}</text>"#, left, escape(title));
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            width - right,
            left - 4.0,
            yy + 4.0
        );
    }
    for (c, cat) in categories.iter().enumerate() {
        let x0 = left + group_w * c as f64;
        for (s, ser) in series.iter().enumerate() {
            let v = ser.values.get(c).copied().unwrap_or(0.0);
            if !v.is_finite() {
                continue;
            }
            let x = x0 + 3.0 + bar_w * s as f64;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{:.1}" width="{bar_w}" height="{:.1}" fill="{}"><title>{}: {v:.4}</title></rect>"#,
                y(v),
                top + plot_h - y(v),
                PALETTE[s % PALETTE.len()],
                escape(&ser.label)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + group_w / 2.0,
            top + plot_h + 16.0,
            escape(cat)
        );
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        top + plot_h,
        width - right,
        top + plot_h
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">budget</text>"#,
        left + (width - left - right) / 2.0,
        height - 8.0
    );
    for (s, ser) in series.iter().enumerate() {
        let ly = top + 14.0 * s as f64;
        let lx = width - right + 12.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            ly,
            PALETTE[s % PALETTE.len()],
            lx + 14.0,
            ly + 9.0,
            escape(&ser.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// One bar series per subpopulation over the budgets, in file order.
pub fn posterior_chart(title: &str, rows: &[PosteriorRow]) -> String {
    let mut budgets: Vec<f64> = Vec::new();
    for r in rows {
        if !budgets.contains(&r.budget) {
            budgets.push(r.budget);
        }
    }
    let subpops = rows.iter().map(|r| r.subpop + 1).max().unwrap_or(0);
    let series: Vec<Series> = (0..subpops)
        .map(|s| Series {
            label: format!("subpop {s}"),
            values: budgets
                .iter()
                .map(|&b| rows.iter().find(|r| r.subpop == s && r.budget == b).map_or(0.0, |r| r.probability))
                .collect(),
        })
        .collect();
    let categories: Vec<String> = budgets.iter().map(|b| b.to_string()).collect();
    bar_chart_svg(title, &categories, &series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_bar_per_value() {
        let rows: Vec<PosteriorRow> = (0..2)
            .flat_map(|s| (0..3).map(move |b| PosteriorRow { subpop: s, budget: b as f64, probability: 0.25 }))
            .collect();
        let svg = posterior_chart("prior <libm>", &rows);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<title>").count(), 6);
        assert!(svg.contains("prior &lt;libm&gt;"));
    }

    #[test]
    fn posterior_csv_round_trips() {
        let text = "subpop,budget,probability\n0,1,0.75\n0,2,0.25\n";
        let rows = read_posterior_csv(text.as_bytes()).unwrap();
        assert_eq!(rows[1], PosteriorRow { subpop: 0, budget: 2.0, probability: 0.25 });
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r).unwrap();
        }
        assert_eq!(
            String::from_utf8(w.into_inner().unwrap()).unwrap(),
            "subpop,budget,probability\n0,1.0,0.75\n0,2.0,0.25\n"
        );
    }
}
