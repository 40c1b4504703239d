//! CSV and SVG output of evaluation reports.
//!
//! CSV columns: `domain,stage,class,dice_mean,dice_std,count`. `class` is a
//! class index for per-class rows and `mean_fg` for the per-domain summary
//! row (mean over samples of the foreground-class mean).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{DomainReport, Stage};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "domain,stage,class,dice_mean,dice_std,count";

pub fn write_report_csv(reports: &[DomainReport], path: &Path) -> Result<()> {
    fs::write(path, report_csv(reports))?;
    Ok(())
}

pub fn report_csv(reports: &[DomainReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for c in 0..r.classes {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{}",
                r.domain,
                r.stage.name(),
                c,
                r.class_mean(c),
                r.class_std(c),
                r.count()
            );
        }
        let _ = writeln!(
            out,
            "{},{},mean_fg,{:.6},{:.6},{}",
            r.domain,
            r.stage.name(),
            r.mean_foreground(),
            r.foreground_std(),
            r.count()
        );
    }
    out
}

/// One parsed CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub domain: String,
    pub stage: Stage,
    pub class: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub count: usize,
}

pub fn read_report_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    let bad = |line: usize, msg: String| Error::Format {
        offset: line as u64,
        msg,
    };
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        h => return Err(bad(0, format!("unexpected header {h:?}"))),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(n + 1, format!("expected 6 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(n + 1, e.to_string()));
        rows.push(CsvRow {
            domain: f[0].to_owned(),
            stage: f[1].parse()?,
            class: f[2].to_owned(),
            dice_mean: num(f[3])?,
            dice_std: num(f[4])?,
            count: f[5].parse().map_err(|e: std::num::ParseIntError| bad(n + 1, e.to_string()))?,
        });
    }
    Ok(rows)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Box plot of per-sample foreground Dice, one box per report.
pub fn box_plot_svg(reports: &[DomainReport]) -> String {
    let (w, h, pad, box_w) = (80.0 + 90.0 * reports.len() as f64, 320.0, 40.0, 40.0);
    let plot_h = h - 2.0 * pad - 30.0;
    let y = |v: f64| pad + (1.0 - v.clamp(0.0, 1.0)) * plot_h;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{}" x2="{pad}" y2="{}" stroke="black"/>"#, y(1.0), y(0.0));
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, pad - 4.0, y(v) + 3.0);
    }
    for (k, r) in reports.iter().enumerate() {
        let mut v: Vec<f64> = (0..r.count()).map(|i| r.sample_foreground(i)).collect();
        v.sort_by(f64::total_cmp);
        if v.is_empty() {
            continue;
        }
        let cx = pad + 50.0 + 90.0 * k as f64;
        let (q0, q1, q2, q3, q4) = (v[0], quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75), v[v.len() - 1]);
        let x0 = cx - box_w / 2.0;
        let _ = writeln!(s, r#"<line x1="{cx}" y1="{:.1}" x2="{cx}" y2="{:.1}" stroke="black"/>"#, y(q4), y(q0));
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{:.1}" width="{box_w}" height="{:.1}" fill="lightsteelblue" stroke="black"/>"#,
            y(q3),
            (y(q1) - y(q3)).max(0.5)
        );
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{:.1}" x2="{}" y2="{:.1}" stroke="black" stroke-width="2"/>"#, y(q2), x0 + box_w, y(q2));
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" text-anchor="middle">{} ({})</text>"#,
            h - pad,
            xml_escape(&r.domain),
            r.stage.name()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
