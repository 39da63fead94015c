//! Closed-loop evaluation: replanning rollouts with a kinematic point
//! follower, goal-reached and traversability statistics, the semantic vs
//! geometric-only comparison, and SVG path plots.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmap::{CostMap, HeightMap, ScalarField};
use crate::datagen::{build_reachability_graph, generate_pairs, sample_viewpoints, DatagenError, PairConfig, TrainingSample};
use crate::envworld::{DepthScan, EnvError, Environment2D, Raycaster, RobotPose, SemanticScan, SensorConfig};
use crate::losses::{path_traversability, LossContext, LossError};
use crate::planner::{plan, PlannerConfig, PlannerError, PlannerOutput, PlannerParams};
use crate::semantics::CostTable;
use crate::training::{train, TrainConfig, TrainError, TrainHistory, TrainMaps};
use crate::trajectory::{Point3, TrajectoryError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("start ({x:.3}, {y:.3}) lies outside the environment")]
    OutOfEnv { x: f64, y: f64 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Semantic,
    /// Semantic scans replaced by the constant `unknown` color.
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub goal_threshold: f64,
    /// Distance advanced along each accepted plan.
    pub step_length: f64,
    pub max_replans: usize,
    pub delta_mu: f64,
    /// Yaw perturbation (radians) for the single retry after a gate rejection.
    pub retry_yaw: f64,
    pub variant: Variant,
    pub sensor: SensorConfig,
    pub h_r: f64,
    pub w_r: f64,
    pub samples_per_segment: usize,
    // Pair drawing.
    pub n_viewpoints: usize,
    pub access_threshold: f64,
    pub edge_threshold: f64,
    pub fov_ratio: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            goal_threshold: 0.5,
            step_length: 1.0,
            max_replans: 200,
            delta_mu: 0.5,
            retry_yaw: 15f64.to_radians(),
            variant: Variant::Semantic,
            sensor: SensorConfig::default(),
            h_r: 0.5,
            w_r: 0.5,
            samples_per_segment: 10,
            n_viewpoints: 300,
            access_threshold: 1.5,
            edge_threshold: 1.75,
            fov_ratio: 0.75,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.goal_threshold > 0.0) {
            return Err(EvalError::Config("goal_threshold must be > 0".into()));
        }
        if self.max_replans < 1 {
            return Err(EvalError::Config("max_replans must be >= 1".into()));
        }
        if !(self.step_length > 0.0) {
            return Err(EvalError::Config("step_length must be > 0".into()));
        }
        Ok(())
    }
}

/// What a policy sees at each replanning step. The pose and world goal are
/// only used by test stubs; the network reads the scans and the robot-frame goal.
pub struct Observation<'o> {
    pub pose: RobotPose,
    pub depth: &'o DepthScan,
    pub semantic: &'o SemanticScan,
    pub goal_robot: Point3,
    pub goal_world: Point3,
}

pub trait Policy: Sync {
    fn act(&self, obs: &Observation<'_>) -> Result<PlannerOutput, EvalError>;
}

impl Policy for PlannerParams {
    fn act(&self, obs: &Observation<'_>) -> Result<PlannerOutput, EvalError> {
        Ok(plan(obs.depth, obs.semantic, obs.goal_robot, self)?.0)
    }
}

/// Environment plus the maps an evaluation reads.
#[derive(Clone, Copy)]
pub struct EvalWorld<'a> {
    pub env: &'a Environment2D,
    pub table: &'a CostTable,
    pub semantic: &'a CostMap,
    pub geometric: &'a CostMap,
    pub height: &'a HeightMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Reached,
    GateStopped,
    Collided,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub start: RobotPose,
    pub goal: Point3,
    /// Executed xy path, starting at the start pose.
    pub path: Vec<[f64; 2]>,
    pub outcome: Outcome,
    /// Policy queries made.
    pub replans: usize,
    pub gate_rejections: usize,
    pub final_distance: f64,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Runs one closed-loop rollout. `seed` drives the retry direction.
pub fn rollout(
    policy: &dyn Policy,
    world: &EvalWorld<'_>,
    start: RobotPose,
    goal: Point3,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<Rollout, EvalError> {
    cfg.validate()?;
    if !world.env.contains(start.x, start.y) {
        return Err(EvalError::OutOfEnv { x: start.x, y: start.y });
    }
    let caster = Raycaster::new(world.env, world.table)?;
    let mut ctx = LossContext::new(world.semantic, world.height, cfg.edge_threshold);
    ctx.h_r = cfg.h_r;
    ctx.samples_per_segment = cfg.samples_per_segment;
    let blind = SemanticScan::blind(world.table, &cfg.sensor);
    let goal_xy = [goal[0], goal[1]];
    let probe_step = world.env.resolution() / 4.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pose = start;
    let mut path = vec![[start.x, start.y]];
    let mut replans = 0;
    let mut gate_rejections = 0;
    let mut retried = false;
    let finish = |path: Vec<[f64; 2]>, outcome, replans, gate_rejections| {
        let last = *path.last().expect("path holds the start");
        Rollout {
            start,
            goal,
            final_distance: dist2(last, goal_xy),
            path,
            outcome,
            replans,
            gate_rejections,
        }
    };

    while replans < cfg.max_replans {
        if dist2([pose.x, pose.y], goal_xy) < cfg.goal_threshold {
            return Ok(finish(path, Outcome::Reached, replans, gate_rejections));
        }
        let (depth, semantic) = caster.scan(&pose, &cfg.sensor)?;
        let semantic = match cfg.variant {
            Variant::Semantic => semantic,
            Variant::Geometric => blind.clone(),
        };
        let obs = Observation {
            pose,
            depth: &depth,
            semantic: &semantic,
            goal_robot: ctx.goal_in_robot_frame(&pose, goal),
            goal_world: goal,
        };
        let out = policy.act(&obs)?;
        replans += 1;
        if out.mu >= cfg.delta_mu {
            gate_rejections += 1;
            if retried {
                return Ok(finish(path, Outcome::GateStopped, replans, gate_rejections));
            }
            retried = true;
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            pose = RobotPose::new(pose.x, pose.y, pose.yaw + sign * cfg.retry_yaw);
            continue;
        }
        retried = false;

        let traj = ctx.world_trajectory(&pose, &out.keypoints)?;
        let mut remaining = cfg.step_length;
        let mut cur = [pose.x, pose.y];
        let mut heading = None;
        'walk: for w in traj.waypoints.windows(2) {
            let (a, b) = ([w[0][0], w[0][1]], [w[1][0], w[1][1]]);
            let len = dist2(a, b);
            if len <= 0.0 {
                continue;
            }
            heading = Some((b[1] - a[1]).atan2(b[0] - a[0]));
            let take = len.min(remaining);
            let n = (take / probe_step).ceil().max(1.0) as usize;
            for k in 1..=n {
                let t = take / len * k as f64 / n as f64;
                let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                if caster.is_obstacle_at(p[0], p[1]) != Some(false) {
                    path.push(p);
                    return Ok(finish(path, Outcome::Collided, replans, gate_rejections));
                }
                if dist2(p, goal_xy) < cfg.goal_threshold {
                    path.push(p);
                    return Ok(finish(path, Outcome::Reached, replans, gate_rejections));
                }
                cur = p;
            }
            path.push(cur);
            remaining -= take;
            if remaining <= 0.0 {
                break 'walk;
            }
        }
        pose = RobotPose::new(cur[0], cur[1], heading.unwrap_or(pose.yaw));
    }
    let outcome = if dist2([pose.x, pose.y], goal_xy) < cfg.goal_threshold {
        Outcome::Reached
    } else {
        Outcome::Timeout
    };
    Ok(finish(path, outcome, replans, gate_rejections))
}

/// Traversability loss of an executed path on `m` (robot base at terrain + h_R).
/// A path that never moved scores the cost under the start.
pub fn executed_path_loss(path: &[[f64; 2]], m: &CostMap, height: &HeightMap, cfg: &RolloutConfig) -> Result<f64, EvalError> {
    let mut pts: Vec<Point3> = Vec::with_capacity(path.len());
    for p in path {
        if pts.last().is_some_and(|q| q[0] == p[0] && q[1] == p[1]) {
            continue;
        }
        pts.push([p[0], p[1], height.sample(p[0], p[1]).value + cfg.h_r]);
    }
    if pts.len() < 2 {
        return Ok(m.sample(path[0][0], path[0][1]).value);
    }
    Ok(path_traversability(&pts, m, cfg.w_r)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    /// Sums in sorted order, so the result does not depend on input order.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
        dev.sort_by(f64::total_cmp);
        MeanStd {
            mean,
            std: (dev.iter().sum::<f64>() / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub goal_reached: f64,
    pub geom_loss: MeanStd,
    pub sem_loss: MeanStd,
    pub rejected_by_gate: f64,
    pub collisions: f64,
    pub timeouts: f64,
}

impl EvalReport {
    pub fn from_rollouts(rollouts: &[Rollout], world: &EvalWorld<'_>, cfg: &RolloutConfig) -> Result<Self, EvalError> {
        let n = rollouts.len();
        let frac = |o: Outcome| rollouts.iter().filter(|r| r.outcome == o).count() as f64 / n.max(1) as f64;
        let geom = rollouts
            .iter()
            .map(|r| executed_path_loss(&r.path, world.geometric, world.height, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        let sem = rollouts
            .iter()
            .map(|r| executed_path_loss(&r.path, world.semantic, world.height, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EvalReport {
            n_pairs: n,
            goal_reached: frac(Outcome::Reached),
            geom_loss: MeanStd::of(&geom),
            sem_loss: MeanStd::of(&sem),
            rejected_by_gate: frac(Outcome::GateStopped),
            collisions: frac(Outcome::Collided),
            timeouts: frac(Outcome::Timeout),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Start-goal pairs drawn from the reachability graph of the semantic costmap.
pub fn draw_pairs(world: &EvalWorld<'_>, n_pairs: usize, cfg: &RolloutConfig, seed: u64) -> Result<Vec<TrainingSample>, EvalError> {
    let pts = sample_viewpoints(world.env, world.table, world.semantic, cfg.n_viewpoints, cfg.access_threshold)?;
    let graph = build_reachability_graph(&pts, world.semantic, cfg.edge_threshold);
    let pair_cfg = PairConfig {
        n_pairs,
        fov_ratio: cfg.fov_ratio,
        seed,
        h_r: cfg.h_r,
    };
    Ok(generate_pairs(&graph, world.env, world.table, world.height, &cfg.sensor, &pair_cfg)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub report: EvalReport,
    pub rollouts: Vec<Rollout>,
}

pub fn evaluate(policy: &dyn Policy, world: &EvalWorld<'_>, n_pairs: usize, cfg: &RolloutConfig, seed: u64) -> Result<EvalRun, EvalError> {
    if n_pairs == 0 {
        return Err(EvalError::Config("n_pairs must be >= 1".into()));
    }
    cfg.validate()?;
    let pairs = draw_pairs(world, n_pairs, cfg, seed)?;
    let rollouts = pairs
        .par_iter()
        .enumerate()
        .map(|(i, s)| rollout(policy, world, s.pose, s.goal, cfg, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ i as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let report = EvalReport::from_rollouts(&rollouts, world, cfg)?;
    Ok(EvalRun { report, rollouts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub semantic: EvalReport,
    pub geometric: EvalReport,
    pub semantic_history: TrainHistory,
    pub geometric_history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<SeedComparison>,
    /// Seed-averaged means.
    pub semantic_sem_loss: f64,
    pub geometric_sem_loss: f64,
    pub semantic_goal_reached: f64,
    pub geometric_goal_reached: f64,
    /// `(semantic - geometric) / geometric` of the seed-averaged sem_loss.
    pub relative_sem_change: f64,
}

impl Comparison {
    pub fn from_seeds(seeds: Vec<SeedComparison>) -> Self {
        let n = seeds.len().max(1) as f64;
        let avg = |f: &dyn Fn(&SeedComparison) -> f64| seeds.iter().map(f).sum::<f64>() / n;
        let s = avg(&|c| c.semantic.sem_loss.mean);
        let g = avg(&|c| c.geometric.sem_loss.mean);
        Comparison {
            semantic_sem_loss: s,
            geometric_sem_loss: g,
            semantic_goal_reached: avg(&|c| c.semantic.goal_reached),
            geometric_goal_reached: avg(&|c| c.geometric.goal_reached),
            relative_sem_change: (s - g) / g,
            seeds,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("seed  variant    goal_reached  geom_loss        sem_loss         gate   collisions\n");
        for c in &self.seeds {
            for (name, r) in [("semantic", &c.semantic), ("geometric", &c.geometric)] {
                let _ = writeln!(
                    s,
                    "{:<5} {:<10} {:>12.3}  {:.3} +- {:.3}  {:.3} +- {:.3}  {:.3}  {:.3}",
                    c.seed, name, r.goal_reached, r.geom_loss.mean, r.geom_loss.std, r.sem_loss.mean, r.sem_loss.std, r.rejected_by_gate, r.collisions
                );
            }
        }
        let _ = writeln!(
            s,
            "mean sem_loss: semantic {:.4}, geometric {:.4}, relative change {:+.2}%",
            self.semantic_sem_loss,
            self.geometric_sem_loss,
            100.0 * self.relative_sem_change
        );
        s
    }
}

/// Scans with the semantic channel replaced by the `unknown` color.
pub fn blind_samples(samples: &[TrainingSample], table: &CostTable) -> Vec<TrainingSample> {
    samples
        .iter()
        .map(|s| TrainingSample {
            semantic: s.semantic.blinded(table),
            ..s.clone()
        })
        .collect()
}

/// Trains both variants on the same samples for each seed and evaluates them
/// on the same pairs. The geometric variant sees blind scans and is trained on
/// the geometric costmap.
pub fn compare_variants(
    samples: &[TrainingSample],
    world: &EvalWorld<'_>,
    seeds: &[u64],
    planner: PlannerConfig,
    train_cfg: &TrainConfig,
    rollout_cfg: &RolloutConfig,
    n_eval: usize,
) -> Result<Comparison, EvalError> {
    let blind = blind_samples(samples, world.table);
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..*train_cfg };
        let p0 = PlannerParams::init(planner, cfg.h_r, seed)?;
        let sem_maps = TrainMaps {
            cost: world.semantic,
            height: world.height,
        };
        let geo_maps = TrainMaps {
            cost: world.geometric,
            height: world.height,
        };
        let (sem_params, sem_hist) = train(samples, &sem_maps, &p0, &cfg)?;
        let (geo_params, geo_hist) = train(&blind, &geo_maps, &p0, &cfg)?;
        let sem_cfg = RolloutConfig {
            variant: Variant::Semantic,
            ..*rollout_cfg
        };
        let geo_cfg = RolloutConfig {
            variant: Variant::Geometric,
            ..*rollout_cfg
        };
        let semantic = evaluate(&sem_params, world, n_eval, &sem_cfg, seed)?.report;
        let geometric = evaluate(&geo_params, world, n_eval, &geo_cfg, seed)?.report;
        rows.push(SeedComparison {
            seed,
            semantic,
            geometric,
            semantic_history: sem_hist,
            geometric_history: geo_hist,
        });
    }
    Ok(Comparison::from_seeds(rows))
}

fn outcome_color(o: Outcome) -> &'static str {
    match o {
        Outcome::Reached => "#1a9641",
        Outcome::Collided => "#d7191c",
        Outcome::GateStopped => "#fdae61",
        Outcome::Timeout => "#2b83ba",
    }
}

/// SVG of a scalar field (light = low) with rollout paths, starts and goals.
/// The field is drawn in square blocks so that at most ~10k rectangles are emitted.
pub fn paths_svg(field: &ScalarField, rollouts: &[Rollout]) -> String {
    let (rows, cols) = field.values.dims();
    let res = field.resolution;
    let scale = 20.0;
    let (w, h) = (cols as f64 * res * scale, rows as f64 * res * scale);
    let block = ((rows * cols) as f64 / 10_000.0).sqrt().ceil().max(1.0) as usize;
    let (lo, hi) = (field.min_value(), field.max_value());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.1} {h:.1}">"#);
    for r0 in (0..rows).step_by(block) {
        for c0 in (0..cols).step_by(block) {
            let (r1, c1) = ((r0 + block).min(rows), (c0 + block).min(cols));
            let mut sum = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    sum += *field.values.get(r, c);
                }
            }
            let v = sum / ((r1 - r0) * (c1 - c0)) as f64;
            let g = (255.0 * (1.0 - (v - lo) / span)).round().clamp(0.0, 255.0) as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="rgb({g},{g},{g})"/>"#,
                c0 as f64 * res * scale,
                h - r1 as f64 * res * scale,
                (c1 - c0) as f64 * res * scale,
                (r1 - r0) as f64 * res * scale
            );
        }
    }
    let tx = |p: [f64; 2]| (p[0] * scale, h - p[1] * scale);
    for r in rollouts {
        let pts: Vec<String> = r
            .path
            .iter()
            .map(|&p| {
                let (x, y) = tx(p);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="3"/>"#,
            pts.join(" "),
            outcome_color(r.outcome)
        );
        let (sx, sy) = tx([r.start.x, r.start.y]);
        let (gx, gy) = tx([r.goal[0], r.goal[1]]);
        let _ = writeln!(s, r##"<circle cx="{sx:.1}" cy="{sy:.1}" r="5" fill="#000"/>"##);
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="none" stroke="#000" stroke-width="2"/>"##,
            gx - 5.0,
            gy - 5.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heading that points from `pose` toward `p`, wrapped into (-pi, pi].
pub fn heading_to(pose: &RobotPose, p: [f64; 2]) -> f64 {
    let a = (p[1] - pose.y).atan2(p[0] - pose.x);
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmap::{build_costmap, geometric_costmap, height_map, SmoothingConfig};
    use crate::datagen::ReachabilityGraph;
    use crate::envworld::{make_corridor, make_rooms, TerrainPattern};
    use crate::semantics::default_table;
    use crate::trajectory::KeyPointSet;

    struct Maps {
        env: Environment2D,
        table: CostTable,
        sem: CostMap,
        geo: CostMap,
        height: HeightMap,
    }

    impl Maps {
        fn new(env: Environment2D) -> Self {
            let table = default_table();
            let sem = build_costmap(&env, &table, &SmoothingConfig::default()).unwrap();
            let geo = geometric_costmap(&env, &table, &SmoothingConfig::default()).unwrap();
            let height = height_map(&env);
            Maps { env, table, sem, geo, height }
        }

        fn world(&self) -> EvalWorld<'_> {
            EvalWorld {
                env: &self.env,
                table: &self.table,
                semantic: &self.sem,
                geometric: &self.geo,
                height: &self.height,
            }
        }
    }

    /// Emits keypoints on the straight line toward the goal.
    struct Straight(f64);

    impl Policy for Straight {
        fn act(&self, obs: &Observation<'_>) -> Result<PlannerOutput, EvalError> {
            let g = obs.goal_robot;
            let pts = (1..=5).map(|k| [g[0] * k as f64 / 5.0, g[1] * k as f64 / 5.0, 0.0]).collect();
            Ok(PlannerOutput {
                keypoints: KeyPointSet::new(pts)?,
                logit: self.0,
                mu: crate::losses::sigmoid(self.0),
            })
        }
    }

    /// Shortest-path oracle over the reachability graph, restricted to edges
    /// that are also clear in the ground-truth labels. Stateless: from any pose
    /// it heads for the visible vertex minimizing distance plus cost-to-go.
    struct Oracle<'a> {
        points: Vec<[f64; 2]>,
        to_goal: Vec<(Point3, Vec<f64>)>,
        caster: Raycaster<'a>,
    }

    impl<'a> Oracle<'a> {
        fn new(graph: &ReachabilityGraph, caster: Raycaster<'a>, goals: &[Point3]) -> Self {
            let points = graph.points.clone();
            let n = points.len();
            let clear = |a: [f64; 2], b: [f64; 2]| ground_clear(&caster, a, b);
            let adj: Vec<Vec<(usize, f64)>> = (0..n)
                .map(|u| {
                    graph.adjacency[u]
                        .iter()
                        .filter(|&&v| clear(points[u], points[v]))
                        .map(|&v| (v, dist2(points[u], points[v])))
                        .collect()
                })
                .collect();
            let to_goal = goals
                .iter()
                .map(|g| {
                    let src = (0..n).find(|&i| dist2(points[i], [g[0], g[1]]) < 1e-12).expect("goal is a vertex");
                    (*g, dijkstra(&adj, src))
                })
                .collect();
            Oracle { points, to_goal, caster }
        }
    }

    fn ground_clear(caster: &Raycaster<'_>, a: [f64; 2], b: [f64; 2]) -> bool {
        let n = (dist2(a, b) / 0.02).ceil().max(1.0) as usize;
        (0..=n).all(|k| {
            let t = k as f64 / n as f64;
            caster.is_obstacle_at(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])) == Some(false)
        })
    }

    fn dijkstra(adj: &[Vec<(usize, f64)>], src: usize) -> Vec<f64> {
        let mut d = vec![f64::INFINITY; adj.len()];
        let mut done = vec![false; adj.len()];
        d[src] = 0.0;
        while let Some(u) = (0..adj.len()).filter(|&i| !done[i] && d[i].is_finite()).min_by(|&a, &b| d[a].total_cmp(&d[b])) {
            done[u] = true;
            for &(v, w) in &adj[u] {
                d[v] = d[v].min(d[u] + w);
            }
        }
        d
    }

    impl Policy for Oracle<'_> {
        fn act(&self, obs: &Observation<'_>) -> Result<PlannerOutput, EvalError> {
            let here = [obs.pose.x, obs.pose.y];
            let (_, cost) = self.to_goal.iter().find(|(g, _)| *g == obs.goal_world).expect("known goal");
            let target = (0..self.points.len())
                .filter(|&i| cost[i].is_finite() && dist2(self.points[i], here) > 1e-9 && ground_clear(&self.caster, here, self.points[i]))
                .min_by(|&a, &b| {
                    let ca = cost[a] + dist2(self.points[a], here);
                    let cb = cost[b] + dist2(self.points[b], here);
                    ca.total_cmp(&cb)
                })
                .map(|i| self.points[i])
                .expect("a reachable vertex is visible");
            let local = obs.pose.to_robot(target);
            let pts = (1..=5).map(|k| [local[0] * k as f64 / 5.0, local[1] * k as f64 / 5.0, 0.0]).collect();
            Ok(PlannerOutput {
                keypoints: KeyPointSet::new(pts)?,
                logit: -10.0,
                mu: crate::losses::sigmoid(-10.0),
            })
        }
    }

    fn corridor() -> Maps {
        Maps::new(make_corridor(12.0, 3.0, &TerrainPattern::Uniform("floor".into()), 0).unwrap())
    }

    #[test]
    fn start_at_goal_is_reached_without_replanning() {
        let m = corridor();
        let r = rollout(&Straight(-5.0), &m.world(), RobotPose::new(2.0, 1.5, 0.0), [2.2, 1.5, 0.5], &RolloutConfig::default(), 0).unwrap();
        assert_eq!(r.outcome, Outcome::Reached);
        assert_eq!(r.replans, 0);
    }

    #[test]
    fn straight_policy_reaches_corridor_goal() {
        let m = corridor();
        let cfg = RolloutConfig::default();
        let r = rollout(&Straight(-5.0), &m.world(), RobotPose::new(1.0, 1.5, 0.0), [10.0, 1.5, 0.5], &cfg, 0).unwrap();
        assert_eq!(r.outcome, Outcome::Reached);
        assert!(r.final_distance < cfg.goal_threshold);
        let len: f64 = r.path.windows(2).map(|w| dist2(w[0], w[1])).sum();
        assert!(len <= 1.5 * 9.0);
    }

    #[test]
    fn gate_always_rejecting_stops_every_pair() {
        let m = Maps::new(crate::envworld::make_urban_toy(0).unwrap());
        let run = evaluate(&Straight(10.0), &m.world(), 12, &RolloutConfig::default(), 1).unwrap();
        assert_eq!(run.report.goal_reached, 0.0);
        assert_eq!(run.report.rejected_by_gate, 1.0);
        assert!(run.rollouts.iter().all(|r| r.gate_rejections == 2 && r.path.len() == 1));
    }

    #[test]
    fn walled_off_goal_is_not_reached() {
        let mut env = make_corridor(12.0, 3.0, &TerrainPattern::Uniform("floor".into()), 0).unwrap();
        env.fill_rect(6.0, 0.0, 6.4, 3.0, "wall");
        let m = Maps::new(env);
        let r = rollout(&Straight(-5.0), &m.world(), RobotPose::new(1.0, 1.5, 0.0), [10.0, 1.5, 0.5], &RolloutConfig::default(), 0).unwrap();
        assert_ne!(r.outcome, Outcome::Reached);
        assert_eq!(r.outcome, Outcome::Collided);
    }

    #[test]
    fn oracle_policy_reaches_every_goal() {
        let m = Maps::new(make_rooms(4, 2).unwrap());
        let cfg = RolloutConfig::default();
        let pts = sample_viewpoints(&m.env, &m.table, &m.sem, cfg.n_viewpoints, cfg.access_threshold).unwrap();
        let graph = build_reachability_graph(&pts, &m.sem, cfg.edge_threshold);
        let goals: Vec<Point3> = draw_pairs(&m.world(), 30, &cfg, 4).unwrap().iter().map(|s| s.goal).collect();
        let oracle = Oracle::new(&graph, Raycaster::new(&m.env, &m.table).unwrap(), &goals);
        let run = evaluate(&oracle, &m.world(), 30, &cfg, 4).unwrap();
        assert_eq!(run.report.goal_reached, 1.0);
    }

    #[test]
    fn same_seed_same_report_and_order_free_aggregation() {
        let m = Maps::new(crate::envworld::make_urban_toy(1).unwrap());
        let cfg = RolloutConfig::default();
        let a = evaluate(&Straight(-5.0), &m.world(), 20, &cfg, 7).unwrap();
        let b = evaluate(&Straight(-5.0), &m.world(), 20, &cfg, 7).unwrap();
        assert_eq!(a, b);
        let mut rev = a.rollouts.clone();
        rev.reverse();
        let r = EvalReport::from_rollouts(&rev, &m.world(), &cfg).unwrap();
        assert_eq!(r, a.report);
        let reached = a.rollouts.iter().filter(|r| r.final_distance < cfg.goal_threshold).count();
        assert_eq!(reached as f64 / 20.0, a.report.goal_reached);
        for f in [a.report.goal_reached, a.report.collisions, a.report.rejected_by_gate, a.report.timeouts] {
            assert!((0.0..=1.0).contains(&f));
        }
        assert!(a.report.sem_loss.mean >= 0.0 && a.report.geom_loss.mean >= 0.0);
    }

    #[test]
    fn relative_change_arithmetic() {
        let rep = |sem: f64| EvalReport {
            n_pairs: 1,
            goal_reached: 1.0,
            geom_loss: MeanStd { mean: 0.1, std: 0.0 },
            sem_loss: MeanStd { mean: sem, std: 0.0 },
            rejected_by_gate: 0.0,
            collisions: 0.0,
            timeouts: 0.0,
        };
        let hist = TrainHistory {
            epochs: vec![],
            best_epoch: 0,
            stop_epoch: 0,
            stop_reason: crate::training::StopReason::MaxEpochs,
        };
        let c = Comparison::from_seeds(vec![SeedComparison {
            seed: 0,
            semantic: rep(0.69),
            geometric: rep(1.06),
            semantic_history: hist.clone(),
            geometric_history: hist,
        }]);
        assert_eq!(c.relative_sem_change, (0.69 - 1.06) / 1.06);
        assert!(c.to_table().contains("relative change"));
    }

    #[test]
    fn svg_contains_paths() {
        let m = corridor();
        let r = rollout(&Straight(-5.0), &m.world(), RobotPose::new(1.0, 1.5, 0.0), [10.0, 1.5, 0.5], &RolloutConfig::default(), 0).unwrap();
        let svg = paths_svg(&m.sem, &[r]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn mean_std_values() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[]), MeanStd::default());
    }
}
