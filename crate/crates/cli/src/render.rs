//! CSV tables and small SVG plots. Each file starts with the stamp (a `#`
//! comment line for CSV, a `<desc>` element for SVG).

use std::fmt::Write as _;

use geomatch::metrics::{EvalReport, ThresholdScore};
use geomatch::trainer::{write_trace_csv, LossRecord};

use crate::store::Stamp;

fn stamp_line(stamp: &Stamp) -> String {
    format!("# {} config_hash={} seed={}\n", stamp.tool, stamp.config_hash, stamp.seed)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One row per (category, alpha); the `all` category is the overall score.
pub fn report_csv(report: &EvalReport, stamp: &Stamp) -> Vec<u8> {
    let mut out = stamp_line(stamp).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["category", "alpha", "pairs", "per_point", "per_image", "geo_per_point", "standard_per_point"])
            .expect("in-memory write");
        let mut row = |cat: &str, pairs: usize, s: &ThresholdScore| {
            w.write_record([
                cat.to_string(),
                s.alpha.to_string(),
                pairs.to_string(),
                s.per_point.to_string(),
                s.per_image.to_string(),
                opt(s.geo_per_point),
                opt(s.standard_per_point),
            ])
            .expect("in-memory write");
        };
        for s in &report.pck {
            row("all", report.pairs, s);
        }
        for (cat, c) in &report.categories {
            for s in &c.pck {
                row(cat, c.pairs, s);
            }
        }
        w.flush().expect("in-memory write");
    }
    out
}

pub fn trace_csv(trace: &[LossRecord], stamp: &Stamp) -> Vec<u8> {
    let mut out = stamp_line(stamp).into_bytes();
    write_trace_csv(trace, &mut out).expect("in-memory write");
    out
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn svg_open(title: &str, stamp: &Stamp) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, "<desc>{} config_hash={} seed={}</desc>", stamp.tool, stamp.config_hash, stamp.seed).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0).unwrap();
    writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    )
    .unwrap();
    s
}

/// Per-step total loss with the y axis scaled to the observed range.
pub fn loss_svg(trace: &[LossRecord], stamp: &Stamp) -> String {
    let mut s = svg_open("training loss", stamp);
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        let lo = trace.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
        let hi = trace.iter().map(|r| r.total).fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let steps = (last.step - first.step).max(1) as f64;
        let x = |step: usize| PAD + (step - first.step) as f64 / steps * (W - 2.0 * PAD);
        let y = |v: f64| H - PAD - (v - lo) / span * (H - 2.0 * PAD);
        let pts: Vec<String> = trace.iter().map(|r| format!("{:.2},{:.2}", x(r.step), y(r.total))).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue"/>"#, pts.join(" ")).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.4}</text>"#, PAD - 4.0, PAD + 4.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{lo:.4}</text>"#, PAD - 4.0, H - PAD).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">step {}</text>"#, W - PAD, H - PAD + 16.0, last.step).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars of overall PCK per alpha: all keypoints, geometry-aware, standard.
pub fn pck_svg(report: &EvalReport, stamp: &Stamp) -> String {
    let mut s = svg_open("PCK", stamp);
    let groups = report.pck.len().max(1) as f64;
    let gw = (W - 2.0 * PAD) / groups;
    let bw = gw / 4.0;
    let series = ["#4c72b0", "#dd8452", "#55a868"];
    for (i, t) in report.pck.iter().enumerate() {
        let x0 = PAD + i as f64 * gw + bw / 2.0;
        for (j, v) in [Some(t.per_point), t.geo_per_point, t.standard_per_point].into_iter().enumerate() {
            let Some(v) = v else { continue };
            let h = v * (H - 2.0 * PAD);
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{bw:.2}" height="{h:.2}" fill="{}"/>"#,
                x0 + j as f64 * bw,
                H - PAD - h,
                series[j]
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">α={}</text>"#,
            x0 + 1.5 * bw,
            H - PAD + 16.0,
            t.alpha
        )
        .unwrap();
    }
    for (j, name) in ["all", "geo-aware", "standard"].iter().enumerate() {
        let y = PAD + 14.0 * j as f64;
        writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, W - PAD - 90.0, y - 9.0, series[j]).unwrap();
        writeln!(s, r#"<text x="{}" y="{y}">{name}</text>"#, W - PAD - 76.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
