//! Differentiable semantic costmap and heightmap.
//!
//! The cost field is built from per-cell class costs in four stages: a
//! Gaussian pre-filter, signed-distance shaping of the costly regions so that
//! cost rises away from their boundaries, an inverted shaping of the cheapest
//! region so that cost falls toward its center, and a Gaussian post-filter.
//! Obstacle cells are finally floored at the obstacle cost.

mod edt;
mod filter;
mod interp;
mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envworld::{EnvError, Environment2D};
use crate::grid::Grid;
use crate::semantics::CostTable;

pub use edt::{signed_distance, squared_edt};
pub use filter::{gaussian_filter, gaussian_kernel};
pub use interp::Sample;
pub use io::write_pgm;

#[derive(Debug, Error)]
pub enum CostMapError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid smoothing config: {0}")]
    Config(String),
    #[error("costmap I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed costmap file: {0}")]
    Format(String),
}

/// A scalar field on a regular grid. Cell `(r, c)` covers
/// `[origin.x + c*res, origin.x + (c+1)*res) x [origin.y + r*res, ...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub values: Grid<f64>,
    pub resolution: f64,
    pub origin: [f64; 2],
}

/// Cost field used by the traversability and collision terms.
pub type CostMap = ScalarField;
/// Terrain elevation in meters.
pub type HeightMap = ScalarField;

impl ScalarField {
    pub fn new(values: Grid<f64>, resolution: f64, origin: [f64; 2]) -> Self {
        ScalarField {
            values,
            resolution,
            origin,
        }
    }

    pub fn interpolate(&self, p: [f64; 2]) -> Sample {
        self.sample(p[0], p[1])
    }

    pub fn max_value(&self) -> f64 {
        self.values.data().iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.data().iter().copied().fold(f64::MAX, f64::min)
    }
}

pub fn interpolate(map: &CostMap, p: [f64; 2]) -> Sample {
    map.sample(p[0], p[1])
}

pub fn height_at(map: &HeightMap, p: [f64; 2]) -> Sample {
    map.sample(p[0], p[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    /// Pre-filter sigma in cells.
    pub sigma1: f64,
    /// Post-filter sigma in cells.
    pub sigma2: f64,
    /// Cost per meter added with depth inside costly regions.
    pub gradient_scale: f64,
    /// Cost per meter removed with depth inside the cheapest region.
    pub inversion_scale: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            sigma1: 2.0,
            sigma2: 3.0,
            gradient_scale: 0.2,
            inversion_scale: 0.2,
        }
    }
}

impl SmoothingConfig {
    fn validate(&self) -> Result<(), CostMapError> {
        let ok = self.sigma1 > 0.0
            && self.sigma2 > 0.0
            && self.gradient_scale >= 0.0
            && self.inversion_scale >= 0.0
            && [self.sigma1, self.sigma2, self.gradient_scale, self.inversion_scale]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(CostMapError::Config(format!("{self:?}")))
        }
    }
}

/// Semantic costmap: raw cost from each cell's class.
pub fn build_costmap(
    env: &Environment2D,
    table: &CostTable,
    cfg: &SmoothingConfig,
) -> Result<CostMap, CostMapError> {
    let classes = env.resolve(table)?;
    let raw = env.labels().map(|&l| classes[l as usize].cost);
    shape_and_smooth(raw, env.resolution(), table, cfg)
}

/// Geometry-only costmap: `c_obs` for obstacle-group cells and `c_free`
/// elsewhere, pushed through the same pipeline.
pub fn geometric_costmap(
    env: &Environment2D,
    table: &CostTable,
    cfg: &SmoothingConfig,
) -> Result<CostMap, CostMapError> {
    let classes = env.resolve(table)?;
    let raw = env.labels().map(|&l| {
        if classes[l as usize].obstacle {
            table.c_obs()
        } else {
            table.c_free()
        }
    });
    shape_and_smooth(raw, env.resolution(), table, cfg)
}

pub fn height_map(env: &Environment2D) -> HeightMap {
    ScalarField::new(env.heights().clone(), env.resolution(), [0.0, 0.0])
}

/// Upper bound on the shaping bonus inside a region of cost `level`.
///
/// Traversable levels may rise by a quarter of the gap to the next group so
/// that shaping never reorders groups; the obstacle level may rise by the gap
/// below it.
fn shaping_cap(level: f64, levels: &[f64; 5]) -> f64 {
    let top = levels[4];
    if level >= top {
        top - levels[3]
    } else {
        let next = levels.iter().copied().find(|&l| l > level).unwrap_or(top);
        0.25 * (next - level)
    }
}

fn shape_and_smooth(
    raw: Grid<f64>,
    resolution: f64,
    table: &CostTable,
    cfg: &SmoothingConfig,
) -> Result<CostMap, CostMapError> {
    cfg.validate()?;
    let levels = table.group_costs().as_array();
    let c_min = levels[0];
    let mut shaped = gaussian_filter(&raw, cfg.sigma1);

    let mut present: Vec<f64> = raw.data().to_vec();
    present.sort_by(f64::total_cmp);
    present.dedup();

    for &level in present.iter().filter(|&&l| l > c_min) {
        let mask = raw.map(|&v| v == level);
        let sd = signed_distance(&mask, resolution);
        let cap = shaping_cap(level, &levels);
        for (i, out) in shaped.data_mut().iter_mut().enumerate() {
            if mask.data()[i] {
                *out += (cfg.gradient_scale * sd.data()[i]).min(cap);
            }
        }
    }

    if present.contains(&c_min) && cfg.inversion_scale > 0.0 {
        let mask = raw.map(|&v| v == c_min);
        let sd = signed_distance(&mask, resolution);
        // The bonus starts at half the gap to the next group on the boundary
        // and fades to zero toward the region's interior.
        let headroom = 0.5 * (levels[1] - c_min);
        let reach = headroom / cfg.inversion_scale;
        for (i, out) in shaped.data_mut().iter_mut().enumerate() {
            let d = sd.data()[i];
            if mask.data()[i] && d > 0.0 {
                *out = (*out + cfg.inversion_scale * (reach - d).max(0.0)).max(0.0);
            }
        }
    }

    // Obstacle cells never drop below the obstacle cost, so smoothing cannot
    // erase obstacles thinner than the filter support.
    let c_obs = levels[4];
    let mut values = gaussian_filter(&shaped, cfg.sigma2);
    for (v, r) in values.data_mut().iter_mut().zip(raw.data()) {
        *v = if *r >= c_obs { v.max(c_obs) } else { v.max(0.0) };
    }
    Ok(ScalarField::new(values, resolution, [0.0, 0.0]))
}
