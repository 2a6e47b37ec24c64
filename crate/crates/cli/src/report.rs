//! Static SVG charts and CSV tables.

use std::fmt::Write as _;

use alphagrpo::grpotrain::{EvalReport, StepMetrics};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    (x0, x1, y0, y1)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = write!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>
<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>
"##,
        W / 2.0,
        escape(title),
        W / 2.0,
        H - 8.0,
        escape(xlabel),
        H / 2.0,
        H / 2.0,
        escape(ylabel),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
    );
}

/// Line chart with a legend; axes span the data.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut out = String::new();
    frame(&mut out, title, xlabel, ylabel);
    for (v, anchor, y) in [(y0, "end", sy(y0)), (y1, "end", sy(y1))] {
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="{anchor}">{v:.3}</text>"#, PAD - 4.0, y + 4.0);
    }
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{v}</text>"#, H - PAD + 14.0);
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            W - PAD - 120.0,
            W - PAD - 100.0,
            W - PAD - 96.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bars, one per labelled value.
pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    let mut out = String::new();
    frame(&mut out, title, "", ylabel);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = (v.max(0.0) / top) * (H - 2.0 * PAD);
        let x = PAD + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/><text x="{:.1}" y="{}" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.4}</text>"#,
            H - PAD - h,
            slot * 0.7,
            COLORS[i % COLORS.len()],
            x + slot * 0.35,
            H - PAD + 14.0,
            escape(label),
            x + slot * 0.35,
            H - PAD - h - 4.0,
        );
    }
    out.push_str("</svg>\n");
    out
}

pub const METRICS_HEADER: &str = "step,mean_reward,reward_std,clip_frac,kl_ar,kl_flow,format_penalty_rate,loss,adv_mean,adv_std,nondegenerate_frac,srr_all_fail,fpr_changed,groups,discarded_groups";

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            m.step,
            m.mean_reward,
            m.reward_std,
            m.clip_frac,
            m.kl_ar,
            m.kl_flow,
            m.format_penalty_rate,
            m.loss,
            m.adv_mean,
            m.adv_std,
            m.nondegenerate_frac,
            m.srr_all_fail,
            m.fpr_changed,
            m.groups,
            m.discarded_groups
        );
    }
    out
}

/// One row per tier plus an `all` row. With refinement results the table
/// gains `improvement_rate`, `mean_initial` and `mean_refined` columns.
pub fn eval_csv(label: &str, r: &EvalReport) -> String {
    let mut out = String::from("run,tier,prompts,mean_reward");
    if r.srr.is_some() {
        out.push_str(",improvement_rate,mean_initial,mean_refined");
    }
    out.push('\n');
    for t in &r.tiers {
        let _ = write!(out, "{label},{:?},{},{}", t.tier, t.prompts, t.mean_reward);
        if r.srr.is_some() {
            out.push_str(",,,");
        }
        out.push('\n');
    }
    let _ = write!(out, "{label},all,{},{}", r.prompts, r.mean_reward);
    if let Some(s) = &r.srr {
        let _ = write!(out, ",{},{},{}", s.improvement_rate, s.mean_initial, s.mean_refined);
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let s = vec![Series { name: "a<b".into(), points: vec![(0.0, 1.0), (1.0, 2.0)] }];
        let svg = line_chart("t", "x", "y", &s);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        let flat = line_chart("t", "x", "y", &[Series { name: "c".into(), points: vec![(3.0, 1.0)] }]);
        assert!(!flat.contains("NaN"));
        let bars = bar_chart("b", "v", &[("x".into(), 0.5), ("y".into(), 0.0)]);
        assert_eq!(bars.matches("<rect").count(), 3);
    }
}
