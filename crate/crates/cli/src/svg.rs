//! Minimal standalone SVG output for loss curves and trajectories.

use std::fmt::Write;

use trajgraft::harness::CurveRow;
use trajgraft::scene::{Agent, Point};

const SIZE: f64 = 480.0;
const PAD: f64 = 24.0;

/// Maps data coordinates into the drawing area, flipping `y` so that up is up.
struct Frame {
    min: Point,
    scale: [f64; 2],
}

impl Frame {
    fn fit(points: impl Iterator<Item = Point>, square: bool) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if !lo[0].is_finite() {
            (lo, hi) = ([0.0; 2], [1.0; 2]);
        }
        let mut span = [(hi[0] - lo[0]).max(1e-9), (hi[1] - lo[1]).max(1e-9)];
        if square {
            let s = span[0].max(span[1]);
            for a in 0..2 {
                lo[a] -= (s - span[a]) / 2.0;
            }
            span = [s, s];
        }
        let inner = SIZE - 2.0 * PAD;
        Self {
            min: lo,
            scale: [inner / span[0], inner / span[1]],
        }
    }

    fn map(&self, p: Point) -> Point {
        [
            PAD + (p[0] - self.min[0]) * self.scale[0],
            SIZE - PAD - (p[1] - self.min[1]) * self.scale[1],
        ]
    }

    fn points(&self, track: &[Point]) -> String {
        let mut s = String::new();
        for (i, p) in track.iter().enumerate() {
            let [x, y] = self.map(*p);
            let sep = if i == 0 { "" } else { " " };
            let _ = write!(s, "{sep}{x:.2},{y:.2}");
        }
        s
    }
}

fn document(body: &str, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <title>{title}</title>\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

fn polyline(out: &mut String, points: &str, color: &str, width: f64, opacity: f64, label: &str) {
    let _ = writeln!(
        out,
        "<polyline class=\"{label}\" points=\"{points}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" stroke-opacity=\"{opacity:.4}\"/>"
    );
}

/// Column name, stroke color and accessor of one loss series.
type Series = (&'static str, &'static str, fn(&CurveRow) -> f64);

/// One polyline per loss column over training steps.
pub fn loss_curve(rows: &[CurveRow]) -> String {
    let series: [Series; 4] = [
        ("l_traj", "#1f77b4", |r| r.l_traj),
        ("l_aux", "#ff7f0e", |r| r.l_aux),
        ("l_cl", "#2ca02c", |r| r.l_cl),
        ("total", "#222222", |r| r.total),
    ];
    let frame = Frame::fit(
        rows.iter().flat_map(|r| series.iter().map(move |(_, _, f)| [r.step as f64, f(r)])),
        false,
    );
    let mut body = String::new();
    for (i, (name, color, f)) in series.iter().enumerate() {
        let track: Vec<Point> = rows.iter().map(|r| [r.step as f64, f(r)]).collect();
        polyline(&mut body, &frame.points(&track), color, 1.5, 1.0, name);
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            SIZE - 90.0,
            PAD + 14.0 * (i + 1) as f64
        );
    }
    document(&body, "training loss")
}

/// Observed history, ground-truth future, and every predicted mode of one
/// agent. Mode opacity follows its probability.
pub fn agent_modes(agent: &Agent, title: &str) -> String {
    let current = agent.current();
    let mut gt = vec![current];
    gt.extend(&agent.future);
    let modes: Vec<(f64, Vec<Point>)> = agent
        .prediction
        .iter()
        .flat_map(|p| p.rho.iter().copied().zip(p.mu.iter().cloned()))
        .map(|(rho, mu)| (rho, std::iter::once(current).chain(mu).collect()))
        .collect();
    let frame = Frame::fit(
        agent
            .observed
            .iter()
            .chain(&gt)
            .chain(modes.iter().flat_map(|(_, m)| m))
            .copied(),
        true,
    );
    let top = modes.iter().map(|(r, _)| *r).fold(0.0, f64::max).max(1e-12);
    let mut body = String::new();
    for (rho, track) in &modes {
        polyline(&mut body, &frame.points(track), "#d62728", 2.0, (rho / top).max(0.05), "mode");
    }
    polyline(&mut body, &frame.points(&agent.observed), "#1f77b4", 2.5, 1.0, "observed");
    polyline(&mut body, &frame.points(&gt), "#2ca02c", 2.5, 1.0, "truth");
    document(&body, title)
}
