//! Procedural 2D semantic worlds and the raycast sensor analogues of the
//! depth and semantic cameras.

mod generate;
mod raycast;

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::Grid;
use crate::semantics::{CostTable, Rgb, SemanticsError};

pub use generate::{make_corridor, make_rooms, make_urban_toy, TerrainPattern};
pub use raycast::{raycast, DepthScan, Raycaster, SemanticScan, SensorConfig};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("pose ({x:.3}, {y:.3}) lies outside the environment")]
    OutOfBounds { x: f64, y: f64 },
    #[error("invalid environment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error("environment I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("environment JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Planar robot pose; yaw is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

pub fn normalize_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

impl RobotPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        RobotPose {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    /// Robot-frame planar vector to world frame (rotation only).
    pub fn rotate_to_world(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn rotate_to_robot(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let r = self.rotate_to_world(p);
        [r[0] + self.x, r[1] + self.y]
    }

    pub fn to_robot(&self, p: [f64; 2]) -> [f64; 2] {
        self.rotate_to_robot([p[0] - self.x, p[1] - self.y])
    }
}

/// Metric grid world: one semantic label and one terrain height per cell.
///
/// Labels are indices into `legend`, a list of class names that must all
/// exist in the cost table the world is used with.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment2D {
    width: f64,
    height: f64,
    resolution: f64,
    legend: Vec<String>,
    labels: Grid<u16>,
    heights: Grid<f64>,
}

/// Per-legend-entry data resolved against a cost table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedClass {
    pub cost: f64,
    pub obstacle: bool,
    pub color: Rgb,
}

#[derive(Serialize, Deserialize)]
struct EnvFile {
    width: f64,
    height: f64,
    resolution: f64,
    rows: usize,
    cols: usize,
    legend: Vec<String>,
    labels: Vec<u16>,
    heights: Vec<f64>,
}

pub fn grid_dims(width: f64, height: f64, resolution: f64) -> (usize, usize) {
    let n = |len: f64| ((len / resolution) - 1e-9).ceil().max(1.0) as usize;
    (n(height), n(width))
}

impl Environment2D {
    /// A world filled with a single class at zero height.
    pub fn new(width: f64, height: f64, resolution: f64, fill: &str) -> Result<Self, EnvError> {
        if !(width > 0.0 && height > 0.0 && resolution > 0.0) {
            return Err(EnvError::Invalid(format!(
                "dimensions must be positive (width {width}, height {height}, resolution {resolution})"
            )));
        }
        let (rows, cols) = grid_dims(width, height, resolution);
        Ok(Environment2D {
            width,
            height,
            resolution,
            legend: vec![fill.to_string()],
            labels: Grid::filled(rows, cols, 0),
            heights: Grid::filled(rows, cols, 0.0),
        })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn rows(&self) -> usize {
        self.labels.rows()
    }

    pub fn cols(&self) -> usize {
        self.labels.cols()
    }

    pub fn legend(&self) -> &[String] {
        &self.legend
    }

    pub fn labels(&self) -> &Grid<u16> {
        &self.labels
    }

    pub fn heights(&self) -> &Grid<f64> {
        &self.heights
    }

    pub fn label_name(&self, r: usize, c: usize) -> &str {
        &self.legend[*self.labels.get(r, c) as usize]
    }

    fn legend_index(&mut self, name: &str) -> u16 {
        match self.legend.iter().position(|n| n == name) {
            Some(i) => i as u16,
            None => {
                self.legend.push(name.to_string());
                (self.legend.len() - 1) as u16
            }
        }
    }

    pub fn set_label(&mut self, r: usize, c: usize, name: &str) {
        let idx = self.legend_index(name);
        self.labels.set(r, c, idx);
    }

    pub fn set_height(&mut self, r: usize, c: usize, h: f64) {
        self.heights.set(r, c, h);
    }

    pub fn cell_center(&self, r: usize, c: usize) -> [f64; 2] {
        [
            (c as f64 + 0.5) * self.resolution,
            (r as f64 + 0.5) * self.resolution,
        ]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 {
            return None;
        }
        let c = (x / self.resolution).floor() as usize;
        let r = (y / self.resolution).floor() as usize;
        (r < self.rows() && c < self.cols()).then_some((r, c))
    }

    /// Cells whose centers fall inside the axis-aligned world rectangle.
    pub fn cells_in_rect(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let span = |lo: f64, hi: f64, n: usize| {
            let a = ((lo / self.resolution) - 1.0).floor().max(0.0) as usize;
            let b = (((hi / self.resolution) + 1.0).ceil().max(0.0) as usize).min(n);
            a..b
        };
        for r in span(y0, y1, self.rows()) {
            for c in span(x0, x1, self.cols()) {
                let [x, y] = self.cell_center(r, c);
                if x >= x0 && x < x1 && y >= y0 && y < y1 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, name: &str) {
        let idx = self.legend_index(name);
        for (r, c) in self.cells_in_rect(x0, y0, x1, y1) {
            self.labels.set(r, c, idx);
        }
    }

    pub fn resolve(&self, table: &CostTable) -> Result<Vec<ResolvedClass>, EnvError> {
        self.legend
            .iter()
            .map(|name| {
                let class = table.class(name)?;
                Ok(ResolvedClass {
                    cost: table.group_costs().get(class.group),
                    obstacle: class.group == crate::semantics::CostGroup::Obs,
                    color: class.color,
                })
            })
            .collect()
    }

    /// Checks the structural invariants and that every label is known to `table`.
    pub fn validate(&self, table: &CostTable) -> Result<(), EnvError> {
        self.resolve(table)?;
        self.check_structure()
    }

    fn check_structure(&self) -> Result<(), EnvError> {
        let dims = grid_dims(self.width, self.height, self.resolution);
        if self.labels.dims() != dims || self.heights.dims() != dims {
            return Err(EnvError::Invalid(format!(
                "grid dimensions {:?} do not match ceil(extent / resolution) = {dims:?}",
                self.labels.dims()
            )));
        }
        if let Some(&bad) = self
            .labels
            .data()
            .iter()
            .find(|&&l| l as usize >= self.legend.len())
        {
            return Err(EnvError::Invalid(format!("label index {bad} outside legend")));
        }
        if self.heights.data().iter().any(|h| !h.is_finite()) {
            return Err(EnvError::Invalid("non-finite terrain height".into()));
        }
        Ok(())
    }

    /// Fraction of cells whose class is in the obstacle group.
    pub fn obstacle_fraction(&self, table: &CostTable) -> Result<f64, EnvError> {
        let resolved = self.resolve(table)?;
        let n = self
            .labels
            .data()
            .iter()
            .filter(|&&l| resolved[l as usize].obstacle)
            .count();
        Ok(n as f64 / self.labels.data().len() as f64)
    }

    pub fn to_json(&self) -> String {
        let file = EnvFile {
            width: self.width,
            height: self.height,
            resolution: self.resolution,
            rows: self.rows(),
            cols: self.cols(),
            legend: self.legend.clone(),
            labels: self.labels.data().to_vec(),
            heights: self.heights.data().to_vec(),
        };
        serde_json::to_string(&file).expect("environment serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let f: EnvFile = serde_json::from_str(text)?;
        if f.labels.len() != f.rows * f.cols || f.heights.len() != f.rows * f.cols {
            return Err(EnvError::Invalid(format!(
                "grid payload does not match {}x{}",
                f.rows, f.cols
            )));
        }
        let env = Environment2D {
            width: f.width,
            height: f.height,
            resolution: f.resolution,
            legend: f.legend,
            labels: Grid::from_vec(f.rows, f.cols, f.labels),
            heights: Grid::from_vec(f.rows, f.cols, f.heights),
        };
        env.check_structure()?;
        Ok(env)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
