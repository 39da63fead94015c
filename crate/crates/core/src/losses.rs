//! Task-level planning cost with analytic gradients.
//!
//! All terms are evaluated in the world frame. Keypoints arrive in the robot
//! frame: x forward, y left, z above the terrain under the robot. The spline
//! origin is the robot base at height `h_r` above that terrain.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmap::{CostMap, HeightMap};
use crate::envworld::RobotPose;
use crate::trajectory::{spline_interpolate, KeyPointSet, Point3, Trajectory, TrajectoryError};

/// Probabilities are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 5.0,
            beta: 2.0,
            gamma: 1.0,
            delta: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.alpha, self.beta, self.gamma, self.delta];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(LossError::Config(format!("weights must be finite and >= 0: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub traversability: f64,
    pub goal: f64,
    pub motion: f64,
    pub height: f64,
    pub collision: f64,
    pub total: f64,
    /// Whether the path was labeled as leaving traversable space.
    pub collided: bool,
    /// d total / d keypoint, robot frame, one row per keypoint.
    pub grad_keypoints: Vec<Point3>,
    /// d total / d collision logit.
    pub grad_logit: f64,
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={:.6} trav={:.6} goal={:.6} motion={:.6} height={:.6} coll={:.6}",
            self.total, self.traversability, self.goal, self.motion, self.height, self.collision
        )
    }
}

/// Maps and constants shared by every loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub cost: &'a CostMap,
    pub height: &'a HeightMap,
    pub weights: LossWeights,
    /// Half robot width in meters.
    pub w_r: f64,
    /// Base height above terrain in meters.
    pub h_r: f64,
    /// Interpolated cost at or above which a path counts as colliding.
    pub obstacle_threshold: f64,
    pub samples_per_segment: usize,
}

impl<'a> LossContext<'a> {
    /// Context with default weights, `w_r = 0.5`, `h_r = 0.5`, 10 samples per
    /// span and the given collision threshold.
    pub fn new(cost: &'a CostMap, height: &'a HeightMap, obstacle_threshold: f64) -> Self {
        LossContext {
            cost,
            height,
            weights: LossWeights::default(),
            w_r: 0.5,
            h_r: 0.5,
            obstacle_threshold,
            samples_per_segment: 10,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        self.weights.validate()?;
        if !(self.w_r >= 0.0 && self.w_r.is_finite() && self.h_r.is_finite()) {
            return Err(LossError::Config(format!("w_r={} h_r={}", self.w_r, self.h_r)));
        }
        if self.samples_per_segment == 0 {
            return Err(LossError::Config("samples_per_segment must be >= 1".into()));
        }
        Ok(())
    }

    pub fn terrain(&self, x: f64, y: f64) -> f64 {
        self.height.sample(x, y).value
    }

    /// World point of a goal location: terrain height plus `h_r`.
    pub fn goal_world(&self, x: f64, y: f64) -> Point3 {
        [x, y, self.terrain(x, y) + self.h_r]
    }

    /// Goal expressed in the robot frame (z relative to terrain under the robot).
    pub fn goal_in_robot_frame(&self, pose: &RobotPose, goal: Point3) -> Point3 {
        goal_to_robot(self.height, pose, goal)
    }

    /// Robot-frame keypoints mapped into the world frame.
    pub fn to_world(&self, pose: &RobotPose, k: &KeyPointSet) -> Result<KeyPointSet, LossError> {
        let ground = self.terrain(pose.x, pose.y);
        let pts = k
            .points
            .iter()
            .map(|p| {
                let xy = pose.to_world([p[0], p[1]]);
                [xy[0], xy[1], p[2] + ground]
            })
            .collect();
        Ok(KeyPointSet::new(pts)?)
    }

    pub fn origin(&self, pose: &RobotPose) -> Point3 {
        [pose.x, pose.y, self.terrain(pose.x, pose.y) + self.h_r]
    }

    /// Dense world-frame path with normals for the given robot-frame keypoints.
    pub fn world_trajectory(&self, pose: &RobotPose, k: &KeyPointSet) -> Result<Trajectory, LossError> {
        let world = self.to_world(pose, k)?;
        let mut t = spline_interpolate(self.origin(pose), &world, self.samples_per_segment)?;
        t.fill_normals()?;
        Ok(t)
    }
}

/// World goal in the robot frame: planar coordinates relative to the pose,
/// z relative to the terrain under the robot.
pub fn goal_to_robot(height: &HeightMap, pose: &RobotPose, goal: Point3) -> Point3 {
    let xy = pose.to_robot([goal[0], goal[1]]);
    [xy[0], xy[1], goal[2] - height.sample(pose.x, pose.y).value]
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross entropy of probability `mu` against `label` in {0, 1}.
pub fn bce(mu: f64, label: f64) -> f64 {
    let p = mu.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Mean cost at the centers and both robot-width offsets, with the gradient
/// w.r.t. every waypoint (including the part that flows through the normals).
pub fn traversability_loss(
    t: &Trajectory,
    m: &CostMap,
    w_r: f64,
) -> Result<(f64, Vec<Point3>), TrajectoryError> {
    if !t.has_normals() {
        return Err(TrajectoryError::MissingNormals);
    }
    let n = t.len();
    let scale = 1.0 / (3 * n) as f64;
    let mut value = 0.0;
    let mut gw = vec![[0.0; 3]; n];
    let mut gn = vec![[0.0; 2]; n];
    for (i, (p, nv)) in t.waypoints.iter().zip(&t.normals).enumerate() {
        let c = m.sample(p[0], p[1]);
        let l = m.sample(p[0] + w_r * nv[0], p[1] + w_r * nv[1]);
        let r = m.sample(p[0] - w_r * nv[0], p[1] - w_r * nv[1]);
        value += c.value + l.value + r.value;
        for k in 0..2 {
            gw[i][k] = scale * (c.grad[k] + l.grad[k] + r.grad[k]);
            gn[i][k] = scale * w_r * (l.grad[k] - r.grad[k]);
        }
    }
    t.backprop_normals(&gn, &mut gw);
    Ok((value * scale, gw))
}

/// `ln(|p_n - goal| + 1)` and its gradient w.r.t. the last waypoint.
pub fn goal_loss(t: &Trajectory, goal: Point3) -> (f64, Point3) {
    let Some(last) = t.waypoints.last() else {
        return (0.0, [0.0; 3]);
    };
    let diff = [last[0] - goal[0], last[1] - goal[1], last[2] - goal[2]];
    let d = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
    if d == 0.0 {
        return (0.0, [0.0; 3]);
    }
    let s = 1.0 / (d * (d + 1.0));
    ((d + 1.0).ln(), [diff[0] * s, diff[1] * s, diff[2] * s])
}

/// Spacing uniformity: variance of segment lengths over squared mean.
pub fn motion_loss(t: &Trajectory) -> (f64, Vec<Point3>) {
    let n = t.len();
    let mut grad = vec![[0.0; 3]; n];
    let segs = &t.seg_lengths;
    if segs.is_empty() {
        return (0.0, grad);
    }
    let count = segs.len() as f64;
    let mean = segs.iter().sum::<f64>() / count;
    if mean <= 0.0 {
        return (0.0, grad);
    }
    let var = segs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / count;
    for (j, &l) in segs.iter().enumerate() {
        if l <= 0.0 {
            continue;
        }
        let dl = (2.0 * (l - mean) / (mean * mean) - 2.0 * var / mean.powi(3)) / count;
        let (a, b) = (t.waypoints[j], t.waypoints[j + 1]);
        for k in 0..3 {
            let u = (b[k] - a[k]) / l;
            grad[j + 1][k] += dl * u;
            grad[j][k] -= dl * u;
        }
    }
    (var / (mean * mean), grad)
}

/// Mean absolute deviation of waypoint height above terrain from `h_r`.
pub fn height_loss(t: &Trajectory, h: &HeightMap, h_r: f64) -> (f64, Vec<Point3>) {
    let n = t.len();
    let mut grad = vec![[0.0; 3]; n];
    if n == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    for (p, g) in t.waypoints.iter().zip(grad.iter_mut()) {
        let s = h.sample(p[0], p[1]);
        let e = p[2] - s.value - h_r;
        value += e.abs();
        let sign = if e > 0.0 {
            1.0
        } else if e < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = [-sign * s.grad[0] * inv, -sign * s.grad[1] * inv, sign * inv];
    }
    (value * inv, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionLoss {
    pub value: f64,
    /// d value / d logit, where `mu = sigmoid(logit)`.
    pub grad_logit: f64,
    pub collided: bool,
}

/// True iff any center waypoint has interpolated cost at or above `threshold`.
pub fn path_collides(t: &Trajectory, m: &CostMap, threshold: f64) -> bool {
    t.waypoints.iter().any(|p| m.sample(p[0], p[1]).value >= threshold)
}

pub fn collision_loss(t: &Trajectory, m: &CostMap, mu: f64, threshold: f64) -> CollisionLoss {
    let collided = path_collides(t, m, threshold);
    let label = if collided { 1.0 } else { 0.0 };
    CollisionLoss {
        value: bce(mu, label),
        grad_logit: mu - label,
        collided,
    }
}

/// Full task loss for robot-frame keypoints and a collision logit, with
/// gradients w.r.t. both.
pub fn total_loss(
    ctx: &LossContext<'_>,
    pose: &RobotPose,
    keypoints: &KeyPointSet,
    mu_logit: f64,
    goal_world: Point3,
) -> Result<LossBreakdown, LossError> {
    ctx.validate()?;
    let t = ctx.world_trajectory(pose, keypoints)?;
    let w = ctx.weights;
    let n = t.len();

    let (trav, g_trav) = traversability_loss(&t, ctx.cost, ctx.w_r)?;
    let (goal, g_goal) = goal_loss(&t, goal_world);
    let (motion, g_motion) = motion_loss(&t);
    let (height, g_height) = height_loss(&t, ctx.height, ctx.h_r);
    let coll = collision_loss(&t, ctx.cost, sigmoid(mu_logit), ctx.obstacle_threshold);

    let mut gw = vec![[0.0; 3]; n];
    for i in 0..n {
        for k in 0..3 {
            gw[i][k] = w.alpha * g_trav[i][k] + w.gamma * g_motion[i][k] + w.delta * g_height[i][k];
        }
    }
    for k in 0..3 {
        gw[n - 1][k] += w.beta * g_goal[k];
    }

    // Control 0 is the fixed origin; the rest map back through the pose.
    let g_controls = t.backprop(&gw);
    let grad_keypoints = g_controls[1..]
        .iter()
        .map(|g| {
            let xy = pose.rotate_to_robot([g[0], g[1]]);
            [xy[0], xy[1], g[2]]
        })
        .collect();

    let total = w.alpha * trav + w.beta * goal + w.gamma * motion + w.delta * height + coll.value;
    let b = LossBreakdown {
        traversability: trav,
        goal,
        motion,
        height,
        collision: coll.value,
        total,
        collided: coll.collided,
        grad_keypoints,
        grad_logit: coll.grad_logit,
    };
    debug_assert!(
        (b.total
            - (w.alpha * b.traversability
                + w.beta * b.goal
                + w.gamma * b.motion
                + w.delta * b.height
                + b.collision))
            .abs()
            <= 1e-12
    );
    Ok(b)
}

/// Traversability cost of an already-executed polyline (no spline).
pub fn path_traversability(points: &[Point3], m: &CostMap, w_r: f64) -> Result<f64, TrajectoryError> {
    let mut t = Trajectory::from_points(points.to_vec());
    t.fill_normals()?;
    Ok(traversability_loss(&t, m, w_r)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmap::ScalarField;
    use crate::grid::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(value: f64) -> ScalarField {
        ScalarField::new(Grid::filled(50, 50, value), 0.2, [0.0, 0.0])
    }

    fn straight(n: usize, spacing: f64, y: f64, z: f64) -> Trajectory {
        let mut t = Trajectory::from_points((0..n).map(|i| [1.0 + i as f64 * spacing, y, z]).collect());
        t.fill_normals().unwrap();
        t
    }

    #[test]
    fn uniform_map_gives_constant() {
        let t = straight(12, 0.3, 4.0, 0.5);
        let (v, g) = traversability_loss(&t, &flat(1.3), 0.5).unwrap();
        assert!((v - 1.3).abs() < 1e-12);
        assert!(g.iter().flatten().all(|x| *x == 0.0));
        assert_eq!(traversability_loss(&t, &flat(0.0), 0.5).unwrap().0, 0.0);
    }

    #[test]
    fn step_matches_dense_average() {
        // Half-plane step at x = 5 crossed by a straight path along +x.
        let map = ScalarField::new(
            Grid::from_fn(50, 50, |_, c| if c >= 25 { 2.0 } else { 0.0 }),
            0.2,
            [0.0, 0.0],
        );
        let t = straight(41, 0.1, 4.0, 0.5);
        let (v, _) = traversability_loss(&t, &map, 0.4).unwrap();
        // Bilinear reconstruction of the step: 0 left of 4.9, 2 right of 5.1, linear between.
        let f = |x: f64| ((x - 4.9) / 0.2).clamp(0.0, 1.0) * 2.0;
        let expect = t.waypoints.iter().map(|p| f(p[0])).sum::<f64>() / t.len() as f64;
        assert!((v - expect).abs() < 1e-6);
    }

    #[test]
    fn goal_identities() {
        let t = straight(5, 0.5, 1.0, 0.0);
        let last = *t.waypoints.last().unwrap();
        assert_eq!(goal_loss(&t, last).0, 0.0);
        let d = std::f64::consts::E - 1.0;
        let g = [last[0] + d, last[1], last[2]];
        assert!((goal_loss(&t, g).0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn goal_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p: Point3 = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)];
            let goal: Point3 = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)];
            let t = Trajectory::from_points(vec![[0.0; 3], p]);
            let (_, g) = goal_loss(&t, goal);
            for k in 0..3 {
                let h = 1e-6;
                let mut a = p;
                let mut b = p;
                a[k] += h;
                b[k] -= h;
                let fd = (goal_loss(&Trajectory::from_points(vec![[0.0; 3], a]), goal).0
                    - goal_loss(&Trajectory::from_points(vec![[0.0; 3], b]), goal).0)
                    / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-6 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn goal_loss_increases_with_distance() {
        let t = Trajectory::from_points(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        let mut prev = -1.0;
        for i in 0..50 {
            let v = goal_loss(&t, [1.0 + 0.1 * i as f64, 0.0, 0.0]).0;
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn motion_examples() {
        assert!(motion_loss(&straight(10, 0.3, 0.0, 0.0)).0.abs() < 1e-12);
        let t = Trajectory::from_points(vec![[0.0; 3], [1.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        assert!((motion_loss(&t).0 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn motion_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let pts: Vec<Point3> = (0..7)
                .map(|i| [i as f64 + rng.gen_range(-0.4..0.4), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3)])
                .collect();
            let (_, g) = motion_loss(&Trajectory::from_points(pts.clone()));
            for i in 0..pts.len() {
                for k in 0..3 {
                    let h = 1e-6;
                    let mut a = pts.clone();
                    let mut b = pts.clone();
                    a[i][k] += h;
                    b[i][k] -= h;
                    let fd = (motion_loss(&Trajectory::from_points(a)).0
                        - motion_loss(&Trajectory::from_points(b)).0)
                        / (2.0 * h);
                    assert!((fd - g[i][k]).abs() <= 1e-6 * fd.abs().max(1e-2), "{fd} {}", g[i][k]);
                }
            }
        }
    }

    #[test]
    fn height_examples() {
        let t = straight(8, 0.4, 3.0, 0.7);
        assert!(height_loss(&t, &flat(0.2), 0.5).0.abs() < 1e-12);
        assert!((height_loss(&t, &flat(0.0), 0.5).0 - 0.2).abs() < 1e-12);
        // Linear ramp h = 0.1 x.
        let ramp = ScalarField::new(Grid::from_fn(40, 40, |_, c| 0.1 * (c as f64 + 0.5) * 0.2), 0.2, [0.0, 0.0]);
        let pts = (0..20).map(|i| {
            let x = 0.5 + 0.3 * i as f64;
            [x, 2.0 + 0.05 * i as f64, 0.1 * x + 0.5]
        });
        let t = Trajectory::from_points(pts.collect());
        assert!(height_loss(&t, &ramp, 0.5).0 < 1e-9);
    }

    #[test]
    fn collision_examples() {
        let t = straight(5, 0.3, 2.0, 0.5);
        let free = flat(0.0);
        let c = collision_loss(&t, &free, 0.5, 1.75);
        assert!(!c.collided);
        assert!((c.value - std::f64::consts::LN_2).abs() < 1e-12);
        let blocked = flat(2.0);
        let c = collision_loss(&t, &blocked, 0.9, 1.75);
        assert!(c.collided);
        assert!((c.value - (-(0.9f64).ln())).abs() < 1e-12);
        assert!(collision_loss(&t, &free, 1e-12, 1.75).value < 1e-6);
        // Flag does not depend on mu.
        for mu in [0.01, 0.3, 0.99] {
            assert!(collision_loss(&t, &blocked, mu, 1.75).collided);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weights_compose_total() {
        let cost = flat(0.3);
        let height = flat(0.0);
        let mut ctx = LossContext::new(&cost, &height, 1.75);
        let pose = RobotPose::new(2.0, 3.0, 0.4);
        let k = KeyPointSet::new(vec![[1.0, 0.2, 0.5], [2.0, 0.1, 0.6], [3.0, -0.3, 0.5]]).unwrap();
        let goal = [5.0, 5.0, 0.5];
        let base = total_loss(&ctx, &pose, &k, 0.3, goal).unwrap();
        ctx.weights.alpha *= 2.0;
        let doubled = total_loss(&ctx, &pose, &k, 0.3, goal).unwrap();
        assert_eq!(doubled.traversability, base.traversability);
        assert_eq!(ctx.weights.alpha * doubled.traversability, 2.0 * (5.0 * base.traversability));
        assert!((doubled.total - base.total - 5.0 * base.traversability).abs() < 1e-12);

        ctx.weights = LossWeights { alpha: 0.0, beta: 1.0, gamma: 0.0, delta: 0.0 };
        let last_world = ctx.to_world(&pose, &k).unwrap().points[2];
        let b = total_loss(&ctx, &pose, &k, 0.3, last_world).unwrap();
        assert!((b.total - b.collision).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_rejected() {
        let cost = flat(0.3);
        let mut ctx = LossContext::new(&cost, &cost, 1.75);
        ctx.weights.gamma = -1.0;
        let k = KeyPointSet::new(vec![[1.0, 0.0, 0.5]]).unwrap();
        assert!(total_loss(&ctx, &RobotPose::new(1.0, 1.0, 0.0), &k, 0.0, [2.0, 1.0, 0.5]).is_err());
    }

    #[test]
    fn frame_round_trip() {
        let cost = flat(0.0);
        let height = flat(0.3);
        let ctx = LossContext::new(&cost, &height, 1.75);
        let pose = RobotPose::new(4.0, 5.0, 1.1);
        let goal = ctx.goal_world(6.0, 7.5);
        let gr = ctx.goal_in_robot_frame(&pose, goal);
        let back = ctx.to_world(&pose, &KeyPointSet::new(vec![gr]).unwrap()).unwrap();
        for k in 0..3 {
            assert!((back.points[0][k] - goal[k]).abs() < 1e-12);
        }
        assert!((gr[2] - 0.5).abs() < 1e-12);
    }
}
