//! SVG rendering of a metrics log: one panel of loss curves, one of lr.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::{read_metrics, MetricsRecord};

const WIDTH: f64 = 720.0;
const PANEL: f64 = 260.0;
const MARGIN: f64 = 50.0;

type Field = (&'static str, &'static str, fn(&MetricsRecord) -> f64);

const LOSS_FIELDS: [Field; 3] = [
    ("loss_total", "#1f77b4", |r| r.loss_total),
    ("loss_gen", "#ff7f0e", |r| r.loss_gen),
    ("loss_dis", "#2ca02c", |r| r.loss_dis),
];
const LR_FIELD: Field = ("lr", "#d62728", |r| r.lr);

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn panel(out: &mut String, records: &[MetricsRecord], fields: &[Field], top: f64, title: &str) {
    let (s0, s1) = bounds(records.iter().map(|r| r.step as f64));
    let (v0, v1) = bounds(records.iter().flat_map(|r| fields.iter().map(move |f| (f.2)(r))));
    let x = |s: f64| MARGIN + (s - s0) / (s1 - s0) * (WIDTH - 2.0 * MARGIN);
    let y = |v: f64| top + PANEL - (v - v0) / (v1 - v0) * PANEL;
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{top}" width="{}" height="{PANEL}" fill="none" stroke="#999"/>"##,
        WIDTH - 2.0 * MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{}" font-size="13">{}</text>"#,
        top - 8.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="4" y="{}" font-size="10">{v1:.4}</text><text x="4" y="{}" font-size="10">{v0:.4}</text>"#,
        top + 10.0,
        top + PANEL
    );
    for (i, (name, color, get)) in fields.iter().enumerate() {
        let pts: Vec<String> = records
            .iter()
            .map(|r| format!("{:.2},{:.2}", x(r.step as f64), y(get(r))))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline data-field="{name}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{name}</text>"#,
            WIDTH - MARGIN - 90.0,
            top + 16.0 + 14.0 * i as f64
        );
    }
}

/// SVG document for `records`, with `config_hash` in its metadata.
pub fn render_svg(records: &[MetricsRecord], config_hash: &str) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Format("metrics log has no records to plot".into()));
    }
    let height = 2.0 * PANEL + 3.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(
        out,
        r#"<metadata><config-hash>{}</config-hash><steps>{}</steps></metadata>"#,
        escape(config_hash),
        records.len()
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    panel(&mut out, records, &LOSS_FIELDS, MARGIN, "loss");
    panel(&mut out, records, &[LR_FIELD], 2.0 * MARGIN + PANEL, "learning rate");
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="11">step</text>"#,
        WIDTH / 2.0,
        height - 10.0
    );
    out.push_str("</svg>\n");
    Ok(out)
}

/// Reads `metrics` and writes the plot to `out`.
pub fn plot_metrics(metrics: &Path, out: &Path, config_hash: &str) -> Result<()> {
    let records = read_metrics(metrics)?;
    std::fs::write(out, render_svg(&records, config_hash)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_curve_per_field() {
        let records: Vec<MetricsRecord> = (1..=5)
            .map(|s| MetricsRecord {
                step: s,
                epoch: 0,
                loss_total: -1.0 - s as f64 * 0.1,
                loss_gen: -0.5,
                loss_dis: -0.5 - s as f64 * 0.1,
                lr: 1e-4 * s as f64,
                time_ms: 1.0,
            })
            .collect();
        let svg = render_svg(&records, "deadbeef").unwrap();
        for f in ["loss_total", "loss_gen", "loss_dis", "lr"] {
            assert_eq!(svg.matches(&format!("data-field=\"{f}\"")).count(), 1, "{f}");
        }
        assert!(svg.contains("<config-hash>deadbeef</config-hash>"));
        assert!(render_svg(&[], "").is_err());
    }
}
