//! Minimal SVG line charts for angle traces and few-shot curves.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::commands::{AggregateRow, AngleRow};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn chart(title: &str, x_label: &str, y_label: &str, series: &[Series], y_range: (f64, f64)) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x_min, x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (x_min, x_max) = if x_min.is_finite() && x_max > x_min { (x_min, x_max) } else { (0.0, 1.0) };
    let (y_min, y_max) = y_range;
    let sx = |x: f64| PAD + (x - x_min) / (x_max - x_min) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y_min) / (y_max - y_min) * (H - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        svg,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(svg, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{y_label}</text>"#, H / 2.0, H / 2.0);
    for i in 0..=4 {
        let y = y_min + (y_max - y_min) * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.2}</text>"#, PAD - 4.0, sy(y) + 4.0);
        let x = x_min + (x_max - x_min) * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x:.0}</text>"#, sx(x), H - PAD + 16.0);
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = PAD + 16.0 * i as f64;
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, W - PAD - 120.0, s.label);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Mean angle per step, one line per `(rule, λ, shots)`.
pub(crate) fn angles_svg(trace: &[AngleRow]) -> String {
    let mut acc: BTreeMap<(String, u64, usize), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in trace {
        let e = acc.entry((r.rule.clone(), r.lambda.to_bits(), r.shots)).or_default().entry(r.step).or_insert((0.0, 0));
        e.0 += r.angle_deg;
        e.1 += 1;
    }
    let series: Vec<Series> = acc
        .into_iter()
        .map(|((rule, lambda, shots), steps)| Series {
            label: format!("{rule} λ={} {shots}-shot", f64::from_bits(lambda)),
            points: steps.into_iter().map(|(s, (sum, n))| (s as f64, sum / n as f64)).collect(),
        })
        .collect();
    chart("Angle between G_ce and G_kl", "step", "degrees", &series, (0.0, 180.0))
}

/// Mean overall accuracy against shots, one line per rule.
pub(crate) fn fewshot_svg(aggregates: &[AggregateRow]) -> String {
    let mut by_rule: BTreeMap<(String, u64, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for a in aggregates {
        by_rule
            .entry((a.rule.clone(), a.lambda.to_bits(), a.alpha.to_bits()))
            .or_default()
            .push((a.shots as f64, a.acc_overall_mean));
    }
    let series: Vec<Series> = by_rule
        .into_iter()
        .map(|((rule, l, al), points)| Series {
            label: match rule.as_str() {
                "PROGRAD" => format!("{rule} λ={}", f64::from_bits(l)),
                "L2REG" => format!("{rule} α={}", f64::from_bits(al)),
                _ => rule,
            },
            points,
        })
        .collect();
    chart("Few-shot accuracy", "shots", "accuracy", &series, (0.0, 1.0))
}
