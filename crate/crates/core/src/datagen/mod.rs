//! Training-pair generation: quasi-random viewpoints on accessible ground,
//! a straight-segment reachability graph, and start/goal pairs rendered from
//! the start pose.

mod dataset;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmap::{CostMap, HeightMap};
use crate::envworld::{normalize_angle, DepthScan, EnvError, Environment2D, Raycaster, RobotPose, SemanticScan, SensorConfig};
use crate::semantics::CostTable;
use crate::trajectory::Point3;

pub use dataset::{export_dataset, import_dataset, Dataset};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("accepted {accepted} of {wanted} viewpoints after {tries} draws (acceptance rate {rate:.4})")]
    TooFewViewpoints {
        accepted: usize,
        wanted: usize,
        tries: usize,
        rate: f64,
    },
    #[error("no pair of connected viewpoints in the reachability graph")]
    NoConnectedPair,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset at {location}: {msg}")]
    Parse { location: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub pose: RobotPose,
    pub depth: DepthScan,
    pub semantic: SemanticScan,
    /// Goal in the world frame; z is terrain height plus the base height.
    pub goal: Point3,
}

impl TrainingSample {
    pub fn goal_robot(&self, height: &HeightMap) -> Point3 {
        crate::losses::goal_to_robot(height, &self.pose, self.goal)
    }
}

/// Radical inverse of `index` in `base`.
pub fn halton(index: u64, base: u64) -> f64 {
    assert!(base >= 2, "halton base must be >= 2");
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// A point is accessible when its interpolated cost is below `threshold` and
/// its cell is not an obstacle.
fn accessible(env: &Environment2D, obstacle: &[bool], m: &CostMap, p: [f64; 2], threshold: f64) -> bool {
    let Some((r, c)) = env.cell_of(p[0], p[1]) else {
        return false;
    };
    !obstacle[*env.labels().get(r, c) as usize] && m.sample(p[0], p[1]).value < threshold
}

fn obstacle_flags(env: &Environment2D, table: &CostTable) -> Result<Vec<bool>, EnvError> {
    Ok(env.resolve(table)?.iter().map(|c| c.obstacle).collect())
}

/// Scaled 2D Halton points (bases 2 and 3) kept when accessible; gives up
/// after `100 n` draws.
pub fn sample_viewpoints(
    env: &Environment2D,
    table: &CostTable,
    m: &CostMap,
    n: usize,
    access_threshold: f64,
) -> Result<Vec<[f64; 2]>, DatagenError> {
    if n == 0 {
        return Err(DatagenError::Invalid("n must be >= 1".into()));
    }
    let obstacle = obstacle_flags(env, table)?;
    let cap = 100 * n;
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < cap {
        tries += 1;
        let p = [halton(tries as u64, 2) * env.width(), halton(tries as u64, 3) * env.height()];
        if accessible(env, &obstacle, m, p, access_threshold) {
            out.push(p);
        }
    }
    if out.len() < n {
        return Err(DatagenError::TooFewViewpoints {
            accepted: out.len(),
            wanted: n,
            tries,
            rate: out.len() as f64 / tries as f64,
        });
    }
    Ok(out)
}

/// Maximum of the bilinear cost along the segment `a -> b`.
///
/// Between crossings of the cell-center grid lines the interpolant is a
/// quadratic in the segment parameter, so the maximum is attained at a
/// crossing, an endpoint, or a quadratic vertex.
pub fn segment_max_cost(m: &CostMap, a: [f64; 2], b: [f64; 2]) -> f64 {
    let res = m.resolution;
    let to_grid = |p: [f64; 2]| [(p[0] - m.origin[0]) / res - 0.5, (p[1] - m.origin[1]) / res - 0.5];
    let (ga, gb) = (to_grid(a), to_grid(b));
    let mut ts = vec![0.0, 1.0];
    for k in 0..2 {
        let (u0, u1) = (ga[k], gb[k]);
        if u0 == u1 {
            continue;
        }
        let (lo, hi) = (u0.min(u1).ceil() as i64, u0.max(u1).floor() as i64);
        for i in lo..=hi {
            let t = (i as f64 - u0) / (u1 - u0);
            if t > 0.0 && t < 1.0 {
                ts.push(t);
            }
        }
    }
    ts.sort_by(f64::total_cmp);
    let at = |t: f64| m.sample(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])).value;
    let mut best = at(0.0);
    for w in ts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let tm = 0.5 * (t0 + t1);
        let (f0, fm, f1) = (at(t0), at(tm), at(t1));
        best = best.max(f0).max(f1);
        // Quadratic through the three samples, in s = (t - t0) / (t1 - t0).
        let c2 = 2.0 * (f0 - 2.0 * fm + f1);
        let c1 = f1 - f0 - c2;
        if c2 < 0.0 {
            let s = -c1 / (2.0 * c2);
            if s > 0.0 && s < 1.0 {
                best = best.max(at(t0 + s * (t1 - t0)));
            }
        }
    }
    best
}

/// True iff the bilinear cost stays below `threshold` along the whole segment.
pub fn segment_clear(m: &CostMap, a: [f64; 2], b: [f64; 2], threshold: f64) -> bool {
    segment_max_cost(m, a, b) < threshold
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachabilityGraph {
    pub points: Vec<[f64; 2]>,
    /// Sorted neighbor lists; symmetric.
    pub adjacency: Vec<Vec<usize>>,
}

impl ReachabilityGraph {
    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].binary_search(&v).is_ok()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Component id per vertex (union-find, ids are the smallest member index).
    pub fn components(&self) -> Vec<usize> {
        let n = self.points.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (u, nbrs) in self.adjacency.iter().enumerate() {
            for &v in nbrs {
                let (a, b) = (find(&mut parent, u), find(&mut parent, v));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        (0..n).map(|x| find(&mut parent, x)).collect()
    }

    /// Breadth-first shortest hop path from `u` to `v`.
    pub fn shortest_path(&self, u: usize, v: usize) -> Option<Vec<usize>> {
        let mut prev = vec![usize::MAX; self.points.len()];
        let mut queue = std::collections::VecDeque::from([u]);
        prev[u] = u;
        while let Some(x) = queue.pop_front() {
            if x == v {
                let mut path = vec![v];
                let mut cur = v;
                while cur != u {
                    cur = prev[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            for &y in &self.adjacency[x] {
                if prev[y] == usize::MAX {
                    prev[y] = x;
                    queue.push_back(y);
                }
            }
        }
        None
    }
}

/// Connects every pair whose straight segment stays below `edge_threshold`.
pub fn build_reachability_graph(points: &[[f64; 2]], m: &CostMap, edge_threshold: f64) -> ReachabilityGraph {
    let n = points.len();
    let upper: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .filter(|&j| segment_clear(m, points[i], points[j], edge_threshold))
                .collect()
        })
        .collect();
    let mut adjacency = vec![Vec::new(); n];
    for (i, nbrs) in upper.iter().enumerate() {
        for &j in nbrs {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
    }
    adjacency.iter_mut().for_each(|a| a.sort_unstable());
    ReachabilityGraph {
        points: points.to_vec(),
        adjacency,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub n_pairs: usize,
    /// Fraction of samples whose goal lies inside the sensor field of view.
    pub fov_ratio: f64,
    pub seed: u64,
    /// Base height added to the terrain at the goal.
    pub h_r: f64,
}

/// Whether a world point lies within the sensor's horizontal field of view.
pub fn in_fov(pose: &RobotPose, fov: f64, p: [f64; 2]) -> bool {
    let bearing = (p[1] - pose.y).atan2(p[0] - pose.x);
    normalize_angle(bearing - pose.yaw).abs() <= fov / 2.0
}

/// Draws start vertices uniformly among those with an edge, goals uniformly
/// among the start's neighbors, and a yaw that puts the goal inside the field
/// of view with probability `fov_ratio` and outside it otherwise.
pub fn generate_pairs(
    graph: &ReachabilityGraph,
    env: &Environment2D,
    table: &CostTable,
    height: &HeightMap,
    sensor: &SensorConfig,
    cfg: &PairConfig,
) -> Result<Vec<TrainingSample>, DatagenError> {
    if !(0.0..=1.0).contains(&cfg.fov_ratio) {
        return Err(DatagenError::Invalid(format!("fov_ratio {} not in [0, 1]", cfg.fov_ratio)));
    }
    let starts: Vec<usize> = (0..graph.points.len()).filter(|&u| !graph.adjacency[u].is_empty()).collect();
    if starts.is_empty() {
        return Err(DatagenError::NoConnectedPair);
    }
    let caster = Raycaster::new(env, table)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = sensor.fov / 2.0;
    let mut out = Vec::with_capacity(cfg.n_pairs);
    for _ in 0..cfg.n_pairs {
        let u = starts[rng.gen_range(0..starts.len())];
        let nbrs = &graph.adjacency[u];
        let v = nbrs[rng.gen_range(0..nbrs.len())];
        let (s, g) = (graph.points[u], graph.points[v]);
        let bearing = (g[1] - s[1]).atan2(g[0] - s[0]);
        let inside = rng.gen_bool(cfg.fov_ratio);
        let offset = if inside || half >= PI {
            rng.gen_range(-half..=half)
        } else {
            rng.gen_range(half..2.0 * PI - half)
        };
        let pose = RobotPose::new(s[0], s[1], bearing - offset);
        let (depth, semantic) = caster.scan(&pose, sensor)?;
        let goal = [g[0], g[1], height.sample(g[0], g[1]).value + cfg.h_r];
        out.push(TrainingSample { pose, depth, semantic, goal });
    }
    Ok(out)
}
