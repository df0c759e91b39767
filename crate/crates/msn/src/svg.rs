//! Static per-sample plot.

use std::fmt::Write as _;

use msn_core::data::Point;
use msn_core::model::{Prepared, PredictionSet};

const SIZE: f64 = 600.0;
const MARGIN: f64 = 30.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Observed path, ground truth, and each channel's keel, proposal and
/// predictions, every channel in its own stroke class.
pub fn render(sample: &Prepared, set: &PredictionSet) -> String {
    let obs = sample.world_obs();
    let truth = sample.world_future();
    let mut all: Vec<Point> = obs.iter().chain(&truth).chain(&set.proposals).copied().collect();
    all.extend(set.predictions.iter().flat_map(|p| p.points.iter().copied()));
    all.extend(set.keels.iter().flatten().copied());
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all.iter().filter(|p| p[0].is_finite() && p[1].is_finite()) {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if !(lo[0] <= hi[0]) {
        lo = [-1.0, -1.0];
        hi = [1.0, 1.0];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let px = |p: &Point| (MARGIN + (p[0] - lo[0]) * scale, SIZE - MARGIN - (p[1] - lo[1]) * scale);
    let points = |pts: &[Point]| {
        pts.iter()
            .filter(|p| p[0].is_finite() && p[1].is_finite())
            .map(|p| {
                let (x, y) = px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, "<title>sample {}</title>", set.sample_id);
    s.push_str("<style>\n");
    s.push_str("polyline { fill: none; stroke-width: 2; }\n");
    s.push_str(".observed { stroke: #000000; stroke-width: 3; }\n");
    s.push_str(".truth { stroke: #000000; stroke-dasharray: 6 4; }\n");
    s.push_str(".keel { stroke-width: 1; stroke-dasharray: 2 3; }\n");
    for c in 0..set.proposals.len() {
        let col = PALETTE[c % PALETTE.len()];
        let _ = writeln!(s, ".channel-{c} {{ stroke: {col}; fill: {col}; }}");
    }
    s.push_str("polyline.channel { fill: none; }\n</style>\n");
    let _ = writeln!(s, r##"<rect width="{SIZE}" height="{SIZE}" fill="#ffffff"/>"##);
    for (c, keel) in set.keels.iter().enumerate() {
        let _ = writeln!(s, r#"<polyline class="keel channel channel-{c}" points="{}"/>"#, points(keel));
    }
    for p in &set.predictions {
        let _ = writeln!(
            s,
            r#"<polyline class="prediction channel channel-{}" data-draw="{}" points="{}"/>"#,
            p.channel,
            p.draw,
            points(&p.points)
        );
    }
    for (c, p) in set.proposals.iter().enumerate() {
        if p[0].is_finite() && p[1].is_finite() {
            let (x, y) = px(p);
            let _ = writeln!(s, r#"<circle class="proposal channel-{c}" cx="{x:.2}" cy="{y:.2}" r="4"/>"#);
        }
    }
    let _ = writeln!(s, r#"<polyline class="observed" points="{}"/>"#, points(&obs));
    let _ = writeln!(s, r#"<polyline class="truth" points="{}"/>"#, points(&truth));
    s.push_str("</svg>\n");
    s
}
