use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::{EnvError, Environment2D, ResolvedClass, RobotPose};
use crate::semantics::{CostTable, Rgb};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub fov: f64,
    pub n_rays: usize,
    pub max_range: f64,
    /// Rows of ground samples in the semantic scan; see [`SensorConfig::ground_range`].
    #[serde(default)]
    pub ground_rows: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            fov: FRAC_PI_2,
            n_rays: 64,
            max_range: 10.0,
            ground_rows: 4,
        }
    }
}

impl SensorConfig {
    /// Bearing of ray `i` relative to the robot heading.
    pub fn ray_offset(&self, i: usize) -> f64 {
        -self.fov / 2.0 + i as f64 * self.fov / (self.n_rays - 1) as f64
    }

    /// Distance of ground row `j` along each ray: `max_range / 2^(ground_rows - 1 - j)`,
    /// so the last row sits at max range and each earlier row at half the distance.
    pub fn ground_range(&self, j: usize) -> f64 {
        self.max_range / 2f64.powi((self.ground_rows - 1 - j) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthScan {
    pub ranges: Vec<f32>,
    pub fov: f64,
    pub max_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticScan {
    /// Color of the first hit per ray.
    pub colors: Vec<Rgb>,
    /// Ground rows, row-major (`ground_rows x n_rays`): the class color under
    /// each ray at the row's distance, or the hit color when the ray stopped earlier.
    #[serde(default)]
    pub ground: Vec<Rgb>,
    pub fov: f64,
}

impl SemanticScan {
    /// A scan that carries no semantic information (every entry "unknown").
    pub fn blind(table: &CostTable, sensor: &SensorConfig) -> Self {
        SemanticScan {
            colors: vec![table.unknown_color(); sensor.n_rays],
            ground: vec![table.unknown_color(); sensor.n_rays * sensor.ground_rows],
            fov: sensor.fov,
        }
    }

    /// A blind scan with the same shape as `self`.
    pub fn blinded(&self, table: &CostTable) -> Self {
        SemanticScan {
            colors: vec![table.unknown_color(); self.colors.len()],
            ground: vec![table.unknown_color(); self.ground.len()],
            fov: self.fov,
        }
    }

    pub fn n_rows(&self) -> usize {
        if self.colors.is_empty() {
            0
        } else {
            1 + self.ground.len() / self.colors.len()
        }
    }
}

/// Smallest reported range when the robot stands inside an obstacle cell.
const MIN_RANGE: f64 = 1e-6;

/// An environment with its legend resolved against a cost table, ready to
/// render scans.
pub struct Raycaster<'a> {
    env: &'a Environment2D,
    classes: Vec<ResolvedClass>,
    unknown: Rgb,
}

impl<'a> Raycaster<'a> {
    pub fn new(env: &'a Environment2D, table: &CostTable) -> Result<Self, EnvError> {
        Ok(Raycaster {
            env,
            classes: env.resolve(table)?,
            unknown: table.unknown_color(),
        })
    }

    pub fn class_at(&self, r: usize, c: usize) -> &ResolvedClass {
        &self.classes[*self.env.labels().get(r, c) as usize]
    }

    pub fn is_obstacle_at(&self, x: f64, y: f64) -> Option<bool> {
        self.env
            .cell_of(x, y)
            .map(|(r, c)| self.class_at(r, c).obstacle)
    }

    /// Casts one ray with grid traversal (one step per crossed cell).
    /// Returns the distance to the first obstacle cell and its color.
    pub fn cast(&self, x: f64, y: f64, bearing: f64, max_range: f64) -> (f64, Rgb) {
        let env = self.env;
        let res = env.resolution();
        let (dy, dx) = bearing.sin_cos();
        let Some((mut r, mut c)) = env.cell_of(x, y) else {
            return (max_range, self.unknown);
        };
        let cls = self.class_at(r, c);
        if cls.obstacle {
            return (MIN_RANGE, cls.color);
        }
        let (step_c, mut t_max_c, t_delta_c) = axis_setup(x, dx, c, res);
        let (step_r, mut t_max_r, t_delta_r) = axis_setup(y, dy, r, res);
        loop {
            let t = if t_max_c < t_max_r {
                let t = t_max_c;
                t_max_c += t_delta_c;
                match step_index(c, step_c, env.cols()) {
                    Some(n) => c = n,
                    None => break,
                }
                t
            } else {
                let t = t_max_r;
                t_max_r += t_delta_r;
                match step_index(r, step_r, env.rows()) {
                    Some(n) => r = n,
                    None => break,
                }
                t
            };
            if t > max_range {
                break;
            }
            let cls = self.class_at(r, c);
            if cls.obstacle {
                return (t.max(MIN_RANGE), cls.color);
            }
        }
        let end = [x + max_range * dx, y + max_range * dy];
        let color = env
            .cell_of(end[0], end[1])
            .map(|(r, c)| self.class_at(r, c).color)
            .unwrap_or(self.unknown);
        (max_range, color)
    }

    pub fn scan(
        &self,
        pose: &RobotPose,
        sensor: &SensorConfig,
    ) -> Result<(DepthScan, SemanticScan), EnvError> {
        if !self.env.contains(pose.x, pose.y) {
            return Err(EnvError::OutOfBounds {
                x: pose.x,
                y: pose.y,
            });
        }
        if sensor.n_rays < 2 {
            return Err(EnvError::Invalid("a scan needs at least 2 rays".into()));
        }
        let mut ranges = Vec::with_capacity(sensor.n_rays);
        let mut colors = Vec::with_capacity(sensor.n_rays);
        let mut ground = vec![self.unknown; sensor.n_rays * sensor.ground_rows];
        for i in 0..sensor.n_rays {
            let bearing = pose.yaw + sensor.ray_offset(i);
            let (range, color) = self.cast(pose.x, pose.y, bearing, sensor.max_range);
            let (dy, dx) = bearing.sin_cos();
            for j in 0..sensor.ground_rows {
                let d = sensor.ground_range(j);
                ground[j * sensor.n_rays + i] = if d >= range && range < sensor.max_range {
                    color
                } else {
                    self.env
                        .cell_of(pose.x + d * dx, pose.y + d * dy)
                        .map_or(self.unknown, |(r, c)| self.class_at(r, c).color)
                };
            }
            ranges.push(range as f32);
            colors.push(color);
        }
        Ok((
            DepthScan {
                ranges,
                fov: sensor.fov,
                max_range: sensor.max_range,
            },
            SemanticScan {
                colors,
                ground,
                fov: sensor.fov,
            },
        ))
    }
}

fn axis_setup(pos: f64, dir: f64, cell: usize, res: f64) -> (i64, f64, f64) {
    if dir > 0.0 {
        (1, ((cell + 1) as f64 * res - pos) / dir, res / dir)
    } else if dir < 0.0 {
        (-1, (cell as f64 * res - pos) / dir, -res / dir)
    } else {
        (0, f64::INFINITY, f64::INFINITY)
    }
}

fn step_index(i: usize, step: i64, n: usize) -> Option<usize> {
    let next = i as i64 + step;
    (next >= 0 && (next as usize) < n).then_some(next as usize)
}

/// Renders the depth and semantic scans seen from `pose`.
pub fn raycast(
    env: &Environment2D,
    table: &CostTable,
    pose: &RobotPose,
    sensor: &SensorConfig,
) -> Result<(DepthScan, SemanticScan), EnvError> {
    Raycaster::new(env, table)?.scan(pose, sensor)
}
