//! Minimal line chart of per-step RMSE, one polyline per method, with
//! forecast-only windows shaded.

use std::fmt::Write;

const W: f64 = 800.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

pub struct Series<'a> {
    pub label: &'a str,
    pub values: &'a [f64],
}

/// `first_step` labels the first sample; `shaded[i]` marks sample `i` as
/// forecast-only. The y axis is log10 when every finite value is positive.
pub fn rmse_chart(series: &[Series], first_step: usize, shaded: &[bool]) -> String {
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let finite = || series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let log = finite().all(|v| v > 0.0) && finite().next().is_some();
    let tf = |v: f64| if log { v.log10() } else { v };
    let (mut lo, mut hi) = finite().map(tf).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let x = |i: usize| LEFT + if n > 1 { pw * i as f64 / (n - 1) as f64 } else { 0.0 };
    let y = |v: f64| TOP + ph * (1.0 - (tf(v) - lo) / (hi - lo));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let mut i = 0;
    while i < shaded.len().min(n) {
        if shaded[i] {
            let start = i;
            while i < shaded.len().min(n) && shaded[i] {
                i += 1;
            }
            let x0 = x(start);
            let x1 = x(i - 1).max(x0 + 1.0);
            let _ = writeln!(
                s,
                r##"<rect x="{x0:.2}" y="{TOP}" width="{:.2}" height="{ph}" fill="#eeeeee"/>"##,
                x1 - x0
            );
        } else {
            i += 1;
        }
    }
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for (k, v) in [(0.0, lo), (1.0, hi)] {
        let label = if log { format!("{:.3e}", 10f64.powf(v)) } else { format!("{v:.3}") };
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#,
            LEFT - 4.0,
            TOP + ph * (1.0 - k) + 4.0
        );
    }
    let last = first_step + n.saturating_sub(1);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{:.2}">{first_step}</text>"#, H - BOTTOM + 16.0);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{last}</text>"#, LEFT + pw, H - BOTTOM + 16.0);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">step</text>"#, LEFT + pw / 2.0, H - 8.0);
    let ylabel = if log { "RMSE (log scale)" } else { "RMSE" };
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">{ylabel}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ser
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 16.0 * (k as f64 + 1.0);
        let lx = W - RIGHT + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, lx + 25.0, escape(ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn polylines(svg: &str) -> Vec<Vec<(f64, f64)>> {
        svg.lines()
            .filter_map(|l| l.split("points=\"").nth(1))
            .map(|rest| {
                rest.split('"')
                    .next()
                    .unwrap()
                    .split_whitespace()
                    .map(|p| {
                        let (a, b) = p.split_once(',').unwrap();
                        (a.parse().unwrap(), b.parse().unwrap())
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn constant_trace_is_horizontal() {
        let v = vec![0.7; 50];
        let svg = rmse_chart(&[Series { label: "ensf", values: &v }], 10, &[]);
        let lines = polylines(&svg);
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].len(), 50);
        assert!(lines[0].iter().all(|p| p.1 == lines[0][0].1));
        assert!(lines[0].windows(2).all(|w| w[1].0 > w[0].0));
    }

    #[test]
    fn larger_values_plot_higher() {
        let a = [1.0, 2.0, 4.0];
        let b = [0.5, 0.5, 0.5];
        let svg = rmse_chart(&[Series { label: "a", values: &a }, Series { label: "b<", values: &b }], 0, &[false, true, true]);
        let lines = polylines(&svg);
        assert!(lines[0][2].1 < lines[0][0].1);
        assert!(lines[1][0].1 > lines[0][0].1);
        assert!(svg.contains("b&lt;"));
        assert!(svg.contains("#eeeeee"));
        assert!(svg.contains("log scale"));
    }

    #[test]
    fn non_finite_and_empty_inputs() {
        let v = [f64::NAN, 0.0, 1.0];
        let svg = rmse_chart(&[Series { label: "x", values: &v }], 0, &[]);
        assert_eq!(polylines(&svg)[0].len(), 2);
        assert!(!svg.contains("log scale"));
        let empty = rmse_chart(&[], 0, &[]);
        assert!(empty.ends_with("</svg>\n"));
    }
}
