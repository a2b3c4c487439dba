//! Planning tasks: cost functions, planar kinematics for collision checks,
//! and the obstacle-aware goal distance field.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, AugmentedState};
use crate::lvm::LatentModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Obstacle {
    Circle { center: [f64; 2], radius: f64 },
    /// Convex polygon, vertices in either winding order.
    Polygon { vertices: Vec<[f64; 2]> },
}

impl Obstacle {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            Obstacle::Circle { center, radius } => (p[0] - center[0]).hypot(p[1] - center[1]) <= *radius,
            Obstacle::Polygon { vertices } => {
                let n = vertices.len();
                if n < 3 {
                    return false;
                }
                let mut sign = 0.0;
                for i in 0..n {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
                    if cross != 0.0 {
                        if sign == 0.0 {
                            sign = cross.signum();
                        } else if cross.signum() != sign {
                            return false;
                        }
                    }
                }
                true
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

/// Band of ground `min <= p[axis] <= max` the foot must not touch, optionally
/// limited to `span` along the other axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForbiddenStrip {
    pub axis: Axis,
    pub min: f64,
    pub max: f64,
    #[serde(default)]
    pub span: Option<[f64; 2]>,
}

impl ForbiddenStrip {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (a, b) = match self.axis {
            Axis::X => (p[0], p[1]),
            Axis::Y => (p[1], p[0]),
        };
        a >= self.min && a <= self.max && self.span.is_none_or(|s| b >= s[0] && b <= s[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Goal {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).hypot(p[1] - self.center[1]) <= self.radius
    }
}

fn default_heading_weight() -> f64 {
    1.0
}
fn default_lateral_weight() -> f64 {
    0.01
}
fn default_speed_weight() -> f64 {
    0.1
}
fn default_target_speed() -> f64 {
    5.0
}
fn default_goal_weight() -> f64 {
    1e-5
}

/// The state-cost families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum CostFamily {
    /// `w_h (theta - theta_d)^2 + w_x |x - x_d| + w_v (v - v_d)^2` plus collisions.
    Heading {
        #[serde(default = "default_heading_weight")]
        heading_weight: f64,
        #[serde(default)]
        target_heading: f64,
        #[serde(default = "default_lateral_weight")]
        lateral_weight: f64,
        #[serde(default)]
        target_x: f64,
        #[serde(default = "default_speed_weight")]
        speed_weight: f64,
        #[serde(default = "default_target_speed")]
        target_speed: f64,
        /// Pose channel holding forward speed.
        #[serde(default)]
        speed_channel: usize,
    },
    /// Collisions, domain bounds and `w * dist(g, goal)^2`.
    Goal {
        #[serde(default = "default_goal_weight")]
        goal_weight: f64,
    },
}

impl CostFamily {
    pub fn heading_default() -> Self {
        CostFamily::Heading {
            heading_weight: default_heading_weight(),
            target_heading: 0.0,
            lateral_weight: default_lateral_weight(),
            target_x: 0.0,
            speed_weight: default_speed_weight(),
            target_speed: default_target_speed(),
            speed_channel: 0,
        }
    }

    pub fn goal_default() -> Self {
        CostFamily::Goal {
            goal_weight: default_goal_weight(),
        }
    }
}

/// Planar serial chain rooted at the global pose. Joint angles are read from
/// pose channels and accumulate along the chain, relative to the heading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    pub link_lengths: Vec<f64>,
    pub joint_channels: Vec<usize>,
    #[serde(default)]
    pub root_height_channel: Option<usize>,
}

impl KinematicChain {
    pub fn validate(&self, pose_dim: usize) -> Result<()> {
        if self.link_lengths.len() != self.joint_channels.len() {
            return Err(Error::invalid("chain needs one joint channel per link"));
        }
        if self.joint_channels.iter().chain(self.root_height_channel.iter()).any(|&c| c >= pose_dim) {
            return Err(Error::invalid("chain channel index out of range"));
        }
        Ok(())
    }

    /// World-frame points `(x, y, z)`: the root, then the end of every link.
    pub fn forward_kinematics(&self, y: &DVector<f64>, g: &Vector3<f64>) -> Vec<[f64; 3]> {
        let z = self.root_height_channel.map_or(0.0, |c| y[c]);
        let mut p = [g[0], g[1], z];
        let mut angle = g[2];
        let mut points = Vec::with_capacity(self.link_lengths.len() + 1);
        points.push(p);
        for (len, &c) in self.link_lengths.iter().zip(&self.joint_channels) {
            angle += y[c];
            p = [p[0] + len * angle.cos(), p[1] + len * angle.sin(), z];
            points.push(p);
        }
        points
    }
}

/// Where the planner starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartState {
    /// `None` uses the model's first latent point.
    #[serde(default)]
    pub latent: Option<Vec<f64>>,
    /// `(x m, y m, heading rad)`
    pub global: [f64; 3],
}

impl StartState {
    /// The augmented start state for `model`.
    pub fn resolve(&self, model: &LatentModel) -> Result<AugmentedState> {
        let latent = match &self.latent {
            Some(v) if v.len() != model.latent_dim() => {
                return Err(Error::invalid(format!("start latent has {} entries, model has {}", v.len(), model.latent_dim())))
            }
            Some(v) => DVector::from_column_slice(v),
            None if model.is_empty() => return Err(Error::invalid("model has no latent points")),
            None => model.latent().row(0).transpose(),
        };
        Ok(AugmentedState::new(latent, Vector3::from(self.global)))
    }
}

/// Shortest obstacle-avoiding distance to the goal on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    origin: [f64; 2],
    resolution: f64,
    nx: usize,
    ny: usize,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct QueueEntry {
    cost: f64,
    cell: usize,
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Parent {
    None,
    Goal,
    Cell(usize),
}

impl DistanceField {
    /// Builds the field over `domain` for cells of side `resolution`.
    ///
    /// Dijkstra over the 8-connected grid with any-angle parent relaxation: a
    /// cell that can see its predecessor's parent (or the goal centre) is
    /// connected to it by a straight segment. Cells whose centre lies in an
    /// obstacle are `+inf`; free cells cut off from the goal receive a finite
    /// penalty larger than any reachable distance.
    pub fn build(domain: &Rect, obstacles: &[Obstacle], goal: &Goal, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::invalid("distance-field resolution must be positive"));
        }
        let w = domain.max[0] - domain.min[0];
        let h = domain.max[1] - domain.min[1];
        let nx = ((w / resolution).ceil() as usize).max(1);
        let ny = ((h / resolution).ceil() as usize).max(1);
        let mut field = Self {
            origin: domain.min,
            resolution,
            nx,
            ny,
            values: vec![f64::INFINITY; nx * ny],
        };
        let blocked: Vec<bool> = (0..nx * ny)
            .map(|c| {
                let p = field.center(c);
                obstacles.iter().any(|o| o.contains(p))
            })
            .collect();

        let dist_goal = |p: [f64; 2]| ((p[0] - goal.center[0]).hypot(p[1] - goal.center[1]) - goal.radius).max(0.0);
        let mut parent = vec![Parent::None; nx * ny];
        let mut heap = BinaryHeap::new();
        for c in 0..nx * ny {
            if !blocked[c] && goal.contains(field.center(c)) {
                field.values[c] = 0.0;
                parent[c] = Parent::Goal;
                heap.push(QueueEntry { cost: 0.0, cell: c });
            }
        }
        if heap.is_empty() {
            // goal smaller than a cell: seed the cell holding its centre
            if let Some(c) = field.cell_of(goal.center) {
                if !blocked[c] {
                    field.values[c] = dist_goal(field.center(c));
                    parent[c] = Parent::Goal;
                    heap.push(QueueEntry { cost: field.values[c], cell: c });
                }
            }
        }
        if heap.is_empty() {
            return Err(Error::UnreachableGoal);
        }

        let mut done = vec![false; nx * ny];
        while let Some(QueueEntry { cost, cell }) = heap.pop() {
            if done[cell] || cost > field.values[cell] {
                continue;
            }
            done[cell] = true;
            let (ci, cj) = (cell % nx, cell / nx);
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (ci as i64 + di, cj as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= nx as i64 || nj >= ny as i64 {
                        continue;
                    }
                    let n = nj as usize * nx + ni as usize;
                    if blocked[n] || done[n] {
                        continue;
                    }
                    let pn = field.center(n);
                    let (cand, par) = match parent[cell] {
                        Parent::Goal if field.visible(&blocked, pn, goal.center) => (dist_goal(pn), Parent::Goal),
                        Parent::Cell(p) if field.visible(&blocked, pn, field.center(p)) => {
                            (field.values[p] + dist(pn, field.center(p)), Parent::Cell(p))
                        }
                        _ => (field.values[cell] + dist(pn, field.center(cell)), Parent::Cell(cell)),
                    };
                    if cand < field.values[n] {
                        field.values[n] = cand;
                        parent[n] = par;
                        heap.push(QueueEntry { cost: cand, cell: n });
                    }
                }
            }
        }

        let penalty = 10.0 * (w.hypot(h) + resolution);
        for c in 0..nx * ny {
            if !blocked[c] && field.values[c].is_infinite() {
                field.values[c] = penalty;
            }
        }
        Ok(field)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Value at cell `(i, j)`, `i` along x.
    pub fn cell_value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        self.center(j * self.nx + i)
    }

    fn center(&self, c: usize) -> [f64; 2] {
        let (i, j) = (c % self.nx, c / self.nx);
        [
            self.origin[0] + (i as f64 + 0.5) * self.resolution,
            self.origin[1] + (j as f64 + 0.5) * self.resolution,
        ]
    }

    fn cell_of(&self, p: [f64; 2]) -> Option<usize> {
        let i = ((p[0] - self.origin[0]) / self.resolution).floor();
        let j = ((p[1] - self.origin[1]) / self.resolution).floor();
        if i < 0.0 || j < 0.0 || i >= self.nx as f64 || j >= self.ny as f64 {
            return None;
        }
        Some(j as usize * self.nx + i as usize)
    }

    fn visible(&self, blocked: &[bool], a: [f64; 2], b: [f64; 2]) -> bool {
        let len = dist(a, b);
        let steps = (4.0 * len / self.resolution).ceil() as usize;
        (0..=steps).all(|s| {
            let t = if steps == 0 { 0.0 } else { s as f64 / steps as f64 };
            let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            self.cell_of(p).is_none_or(|c| !blocked[c])
        })
    }

    /// Bilinear interpolation between cell centres. Corners inside obstacles
    /// are skipped; if all four are, the nearest finite cell is used.
    pub fn value(&self, p: [f64; 2]) -> f64 {
        let fx = ((p[0] - self.origin[0]) / self.resolution - 0.5).clamp(0.0, (self.nx - 1) as f64);
        let fy = ((p[1] - self.origin[1]) / self.resolution - 0.5).clamp(0.0, (self.ny - 1) as f64);
        let (i0, j0) = (fx.floor() as usize, fy.floor() as usize);
        let (i1, j1) = ((i0 + 1).min(self.nx - 1), (j0 + 1).min(self.ny - 1));
        let (tx, ty) = (fx - i0 as f64, fy - j0 as f64);
        let corners = [
            (i0, j0, (1.0 - tx) * (1.0 - ty)),
            (i1, j0, tx * (1.0 - ty)),
            (i0, j1, (1.0 - tx) * ty),
            (i1, j1, tx * ty),
        ];
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (i, j, wgt) in corners {
            let v = self.cell_value(i, j);
            if v.is_finite() && wgt > 0.0 {
                acc += wgt * v;
                wsum += wgt;
            }
        }
        if wsum > 0.0 {
            return acc / wsum;
        }
        let (ci, cj) = (fx.round() as usize, fy.round() as usize);
        let mut best = (f64::INFINITY, f64::INFINITY);
        for j in 0..self.ny {
            for i in 0..self.nx {
                let v = self.cell_value(i, j);
                if v.is_finite() {
                    let d2 = ((i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2)) as f64;
                    if d2 < best.0 {
                        best = (d2, v);
                    }
                }
            }
        }
        best.1
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn default_resolution() -> f64 {
    1.0
}

/// On-disk form of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub domain: Rect,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub forbidden_strips: Vec<ForbiddenStrip>,
    #[serde(default)]
    pub goal: Option<Goal>,
    pub cost: CostFamily,
    pub horizon: usize,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default)]
    pub chain: Option<KinematicChain>,
    #[serde(default)]
    pub start: Option<StartState>,
}

/// A task ready for planning: configuration plus the precomputed goal field.
#[derive(Debug, Clone)]
pub struct Task {
    pub config: TaskConfig,
    field: Option<DistanceField>,
}

impl Task {
    pub fn new(config: TaskConfig) -> Result<Self> {
        if config.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        let d = &config.domain;
        if !(d.max[0] > d.min[0] && d.max[1] > d.min[1]) {
            return Err(Error::invalid("domain must have positive extent"));
        }
        let field = match (&config.cost, &config.goal) {
            (CostFamily::Goal { .. }, None) => return Err(Error::invalid("goal cost family needs a goal")),
            (_, Some(goal)) => {
                if !d.contains(goal.center) {
                    return Err(Error::invalid("goal centre outside the domain"));
                }
                if matches!(config.cost, CostFamily::Goal { .. }) {
                    Some(DistanceField::build(d, &config.obstacles, goal, config.resolution)?)
                } else {
                    None
                }
            }
            _ => None,
        };
        Ok(Self { config, field })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.config)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn chain(&self) -> Option<&KinematicChain> {
        self.config.chain.as_ref()
    }

    pub fn distance_field(&self) -> Option<&DistanceField> {
        self.field.as_ref()
    }

    pub fn in_goal(&self, g: &Vector3<f64>) -> bool {
        self.config.goal.is_some_and(|goal| goal.contains([g[0], g[1]]))
    }

    /// FK points of the pose, or just the root when no chain is configured.
    pub fn points(&self, y: &DVector<f64>, g: &Vector3<f64>) -> Vec<[f64; 3]> {
        match &self.config.chain {
            Some(c) => c.forward_kinematics(y, g),
            None => vec![[g[0], g[1], 0.0]],
        }
    }

    /// `+inf` when any FK point is inside an obstacle or the foot is on a forbidden strip.
    pub fn obstacle_cost(&self, y: &DVector<f64>, g: &Vector3<f64>) -> f64 {
        let pts = self.points(y, g);
        let hit = pts.iter().any(|p| self.config.obstacles.iter().any(|o| o.contains([p[0], p[1]])));
        let foot = pts.last().expect("at least the root");
        if hit || self.config.forbidden_strips.iter().any(|s| s.contains([foot[0], foot[1]])) {
            f64::INFINITY
        } else {
            0.0
        }
    }

    pub fn boundary_cost(&self, g: &Vector3<f64>) -> f64 {
        if self.config.domain.contains([g[0], g[1]]) {
            0.0
        } else {
            f64::INFINITY
        }
    }

    /// State cost `q_k(y, g)`; the emission probability is `exp(-q)`.
    pub fn cost(&self, y: &DVector<f64>, g: &Vector3<f64>, _k: usize) -> f64 {
        let hard = self.boundary_cost(g) + self.obstacle_cost(y, g);
        if hard.is_infinite() {
            return f64::INFINITY;
        }
        match &self.config.cost {
            CostFamily::Heading {
                heading_weight,
                target_heading,
                lateral_weight,
                target_x,
                speed_weight,
                target_speed,
                speed_channel,
            } => {
                let dth = wrap_angle(g[2] - target_heading);
                let v = y.get(*speed_channel).copied().unwrap_or(0.0);
                heading_weight * dth * dth + lateral_weight * (g[0] - target_x).abs() + speed_weight * (v - target_speed).powi(2)
            }
            CostFamily::Goal { goal_weight } => {
                let d = self.field.as_ref().map_or(0.0, |f| f.value([g[0], g[1]]));
                goal_weight * d * d
            }
        }
    }
}

/// `exp(-q)`, exactly 0 for infinite cost.
pub fn emission(q: f64) -> f64 {
    (-q).exp()
}
