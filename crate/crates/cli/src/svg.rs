//! Top-down SVG plot of a task and a plan, written as plain SVG text.

use std::fmt::Write;

use latentplan::planner::Plan;
use latentplan::tasks::{Axis, Obstacle, TaskConfig};

const WIDTH_PX: f64 = 800.0;
const MARGIN_PX: f64 = 20.0;

struct Frame {
    min: [f64; 2],
    max: [f64; 2],
    scale: f64,
}

impl Frame {
    fn new(task: &TaskConfig) -> Self {
        let d = &task.domain;
        Self { min: d.min, max: d.max, scale: (WIDTH_PX - 2.0 * MARGIN_PX) / (d.max[0] - d.min[0]) }
    }

    fn height(&self) -> f64 {
        (self.max[1] - self.min[1]) * self.scale + 2.0 * MARGIN_PX
    }

    /// World to pixel coordinates; y points up in the world.
    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        (MARGIN_PX + (p[0] - self.min[0]) * self.scale, MARGIN_PX + (self.max[1] - p[1]) * self.scale)
    }
}

fn polyline(f: &Frame, pts: &[[f64; 2]]) -> String {
    pts.iter()
        .map(|&p| {
            let (x, y) = f.px(p);
            format!("{x:.2},{y:.2}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// `snapshots` are particle clouds (planar positions) drawn under the trajectory.
pub fn render(task: &TaskConfig, plan: &Plan, snapshots: &[Vec<[f64; 2]>]) -> String {
    let f = Frame::new(task);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#,
        w = WIDTH_PX,
        h = f.height()
    );
    let (x0, y0) = f.px([f.min[0], f.max[1]]);
    let _ = writeln!(
        s,
        r##"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="#fafafa" stroke="#333" stroke-width="1"/>"##,
        (f.max[0] - f.min[0]) * f.scale,
        (f.max[1] - f.min[1]) * f.scale
    );

    for strip in &task.forbidden_strips {
        let span = strip.span.unwrap_or(match strip.axis {
            Axis::X => [f.min[1], f.max[1]],
            Axis::Y => [f.min[0], f.max[0]],
        });
        let (lo, hi) = match strip.axis {
            Axis::X => ([strip.min, span[0]], [strip.max, span[1]]),
            Axis::Y => ([span[0], strip.min], [span[1], strip.max]),
        };
        let (ax, ay) = f.px([lo[0], hi[1]]);
        let _ = writeln!(
            s,
            r##"<rect class="strip" x="{ax:.2}" y="{ay:.2}" width="{:.2}" height="{:.2}" fill="#d62728" fill-opacity="0.5"/>"##,
            (hi[0] - lo[0]) * f.scale,
            (hi[1] - lo[1]) * f.scale
        );
    }

    for obs in &task.obstacles {
        match obs {
            Obstacle::Circle { center, radius } => {
                let (cx, cy) = f.px(*center);
                let _ = writeln!(s, r##"<circle class="obstacle" cx="{cx:.2}" cy="{cy:.2}" r="{:.2}" fill="#777"/>"##, radius * f.scale);
            }
            Obstacle::Polygon { vertices } => {
                let _ = writeln!(s, r##"<polygon class="obstacle" points="{}" fill="#777"/>"##, polyline(&f, vertices));
            }
        }
    }

    if let Some(goal) = &task.goal {
        let (cx, cy) = f.px(goal.center);
        let _ = writeln!(
            s,
            r##"<circle class="goal" cx="{cx:.2}" cy="{cy:.2}" r="{:.2}" fill="#2ca02c" fill-opacity="0.3" stroke="#2ca02c"/>"##,
            goal.radius * f.scale
        );
    }

    for cloud in snapshots {
        let _ = writeln!(s, r##"<g class="particles" fill="#1f77b4" fill-opacity="0.35">"##);
        for &p in cloud {
            let (cx, cy) = f.px(p);
            let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="1.5"/>"#);
        }
        let _ = writeln!(s, "</g>");
    }

    let mut path = vec![[plan.start.global[0], plan.start.global[1]]];
    path.extend(plan.states.iter().map(|st| [st.global[0], st.global[1]]));
    let _ = writeln!(
        s,
        r##"<polyline class="trajectory" points="{}" fill="none" stroke="#ff7f0e" stroke-width="2"/>"##,
        polyline(&f, &path)
    );
    let (sx, sy) = f.px(path[0]);
    let _ = writeln!(s, r##"<circle class="start" cx="{sx:.2}" cy="{sy:.2}" r="4" fill="#000"/>"##);
    let _ = writeln!(s, "</svg>");
    s
}
