//! Expansion of sparse keypoints into a dense path.
//!
//! The path is a uniform Catmull-Rom spline through the robot origin and the
//! keypoints. Every waypoint is a fixed linear combination of at most four
//! control points, so the map from keypoints to waypoints is linear and its
//! Jacobian is stored alongside the samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = [f64; 3];

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("samples_per_segment must be at least 1")]
    NoSamples,
    #[error("a keypoint set needs at least one point")]
    NoKeypoints,
    #[error("non-finite keypoint coordinate")]
    NonFinite,
    #[error("normals need at least two waypoints, got {0}")]
    TooShort(usize),
    #[error("normals have not been computed")]
    MissingNormals,
    #[error("malformed trajectory dump at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyPointSet {
    pub points: Vec<Point3>,
}

impl KeyPointSet {
    pub fn new(points: Vec<Point3>) -> Result<Self, TrajectoryError> {
        if points.is_empty() {
            return Err(TrajectoryError::NoKeypoints);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TrajectoryError::NonFinite);
        }
        Ok(KeyPointSet { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Records how a normal was derived, for differentiating through it.
#[derive(Debug, Clone, Copy, PartialEq)]
enum NormalSource {
    /// Left-perpendicular of `waypoints[plus] - waypoints[minus]`, whose length is `len`.
    Tangent { plus: usize, minus: usize, len: f64 },
    /// Copied from a neighbor because the local tangent vanished.
    Reused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub waypoints: Vec<Point3>,
    /// Unit left-normals in the xy-plane; empty until [`compute_normals`].
    pub normals: Vec<[f64; 2]>,
    pub seg_lengths: Vec<f64>,
    /// Per waypoint: (control index, weight); control 0 is the origin.
    basis: Vec<[(usize, f64); 4]>,
    n_controls: usize,
    normal_src: Vec<NormalSource>,
}

fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let (t2, t3) = (t * t, t * t * t);
    [
        0.5 * (-t + 2.0 * t2 - t3),
        0.5 * (2.0 - 5.0 * t2 + 3.0 * t3),
        0.5 * (t + 4.0 * t2 - 3.0 * t3),
        0.5 * (-t2 + t3),
    ]
}

fn dist3(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Catmull-Rom spline through `origin` followed by the keypoints, sampled
/// `samples_per_segment` times per span plus the final endpoint. Consecutive
/// duplicate control points are merged so no span has zero length.
pub fn spline_interpolate(
    origin: Point3,
    keypoints: &KeyPointSet,
    samples_per_segment: usize,
) -> Result<Trajectory, TrajectoryError> {
    if samples_per_segment == 0 {
        return Err(TrajectoryError::NoSamples);
    }
    if keypoints.is_empty() {
        return Err(TrajectoryError::NoKeypoints);
    }
    let controls: Vec<Point3> = std::iter::once(origin)
        .chain(keypoints.points.iter().copied())
        .collect();
    let mut kept = vec![0usize];
    for (j, p) in controls.iter().enumerate().skip(1) {
        if *p != controls[*kept.last().unwrap()] {
            kept.push(j);
        }
    }
    let n_spans = kept.len() - 1;

    // Each spline control is a combination of original controls; phantom end
    // points are reflections of their neighbors.
    type Combo = Vec<(usize, f64)>;
    let at = |i: usize| -> Combo { vec![(kept[i], 1.0)] };
    let ctrl = |i: isize| -> Combo {
        if i < 0 {
            vec![(kept[0], 2.0), (kept[1], -1.0)]
        } else if i as usize > n_spans {
            vec![(kept[n_spans], 2.0), (kept[n_spans - 1], -1.0)]
        } else {
            at(i as usize)
        }
    };

    let mut basis = Vec::with_capacity(1 + n_spans * samples_per_segment);
    let mut push = |combos: [Combo; 4], w: [f64; 4]| {
        let mut acc: Vec<(usize, f64)> = Vec::with_capacity(4);
        for (combo, wk) in combos.iter().zip(w) {
            for &(idx, c) in combo {
                match acc.iter_mut().find(|(i, _)| *i == idx) {
                    Some(e) => e.1 += wk * c,
                    None => acc.push((idx, wk * c)),
                }
            }
        }
        let mut fixed = [(0usize, 0.0); 4];
        for (slot, e) in fixed.iter_mut().zip(acc) {
            *slot = e;
        }
        basis.push(fixed);
    };
    if n_spans == 0 {
        push([at(0), vec![], vec![], vec![]], [1.0, 0.0, 0.0, 0.0]);
    }
    for s in 0..n_spans {
        let si = s as isize;
        let last = s + 1 == n_spans;
        let count = if last {
            samples_per_segment + 1
        } else {
            samples_per_segment
        };
        for j in 0..count {
            let t = j as f64 / samples_per_segment as f64;
            push(
                [ctrl(si - 1), ctrl(si), ctrl(si + 1), ctrl(si + 2)],
                catmull_rom_weights(t),
            );
        }
    }

    let waypoints: Vec<Point3> = basis
        .iter()
        .map(|b| {
            let mut p = [0.0; 3];
            for &(idx, w) in b {
                for k in 0..3 {
                    p[k] += w * controls[idx][k];
                }
            }
            p
        })
        .collect();
    let seg_lengths = waypoints.windows(2).map(|w| dist3(&w[0], &w[1])).collect();
    Ok(Trajectory {
        waypoints,
        normals: Vec::new(),
        seg_lengths,
        basis,
        n_controls: controls.len(),
        normal_src: Vec::new(),
    })
}

/// Fills in unit left-normals of the xy-tangent (central differences inside,
/// one-sided at the ends). A vanishing tangent reuses a neighboring normal.
pub fn compute_normals(t: &Trajectory) -> Result<Trajectory, TrajectoryError> {
    let mut out = t.clone();
    out.fill_normals()?;
    Ok(out)
}

impl Trajectory {
    /// Builds a trajectory directly from points (no spline; Jacobian is identity).
    pub fn from_points(points: Vec<Point3>) -> Self {
        let n = points.len();
        let seg_lengths = points.windows(2).map(|w| dist3(&w[0], &w[1])).collect();
        Trajectory {
            waypoints: points,
            normals: Vec::new(),
            seg_lengths,
            basis: (0..n).map(|i| [(i, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)]).collect(),
            n_controls: n,
            normal_src: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn n_controls(&self) -> usize {
        self.n_controls
    }

    pub fn arc_length(&self) -> f64 {
        self.seg_lengths.iter().sum()
    }

    pub fn fill_normals(&mut self) -> Result<(), TrajectoryError> {
        let n = self.waypoints.len();
        if n < 2 {
            return Err(TrajectoryError::TooShort(n));
        }
        let mut normals: Vec<Option<[f64; 2]>> = Vec::with_capacity(n);
        let mut src = Vec::with_capacity(n);
        for i in 0..n {
            let (plus, minus) = match i {
                0 => (1, 0),
                _ if i == n - 1 => (n - 1, n - 2),
                _ => (i + 1, i - 1),
            };
            let tx = self.waypoints[plus][0] - self.waypoints[minus][0];
            let ty = self.waypoints[plus][1] - self.waypoints[minus][1];
            let len = tx.hypot(ty);
            if len > 0.0 {
                normals.push(Some([-ty / len, tx / len]));
                src.push(NormalSource::Tangent { plus, minus, len });
            } else {
                normals.push(None);
                src.push(NormalSource::Reused);
            }
        }
        let first = normals.iter().flatten().next().copied().unwrap_or([0.0, 1.0]);
        let mut prev = first;
        self.normals = normals
            .into_iter()
            .map(|n| {
                let v = n.unwrap_or(prev);
                prev = v;
                v
            })
            .collect();
        self.normal_src = src;
        Ok(())
    }

    /// Chains per-waypoint gradients back to the control points
    /// (index 0 is the origin).
    pub fn backprop(&self, grad_waypoints: &[Point3]) -> Vec<Point3> {
        let mut out = vec![[0.0; 3]; self.n_controls];
        for (b, g) in self.basis.iter().zip(grad_waypoints) {
            for &(idx, w) in b {
                if w != 0.0 {
                    for k in 0..3 {
                        out[idx][k] += w * g[k];
                    }
                }
            }
        }
        out
    }

    /// Adds to `grad_waypoints` the contribution of gradients taken with
    /// respect to the normals.
    pub fn backprop_normals(&self, grad_normals: &[[f64; 2]], grad_waypoints: &mut [Point3]) {
        for ((src, n), g) in self.normal_src.iter().zip(&self.normals).zip(grad_normals) {
            if let NormalSource::Tangent { plus, minus, len } = *src {
                // d n / d u = (I - n n^T) / |u| with u = (-t_y, t_x).
                let dot = n[0] * g[0] + n[1] * g[1];
                let gu = [(g[0] - dot * n[0]) / len, (g[1] - dot * n[1]) / len];
                let gt = [gu[1], -gu[0]];
                for k in 0..2 {
                    grad_waypoints[plus][k] += gt[k];
                    grad_waypoints[minus][k] -= gt[k];
                }
            }
        }
    }

    pub fn has_normals(&self) -> bool {
        self.normals.len() == self.waypoints.len() && !self.waypoints.is_empty()
    }

    /// One `x y z nx ny` row per waypoint.
    pub fn to_text(&self) -> Result<String, TrajectoryError> {
        if !self.has_normals() {
            return Err(TrajectoryError::MissingNormals);
        }
        let mut s = String::new();
        for (p, n) in self.waypoints.iter().zip(&self.normals) {
            s.push_str(&format!("{} {} {} {} {}\n", p[0], p[1], p[2], n[0], n[1]));
        }
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self, TrajectoryError> {
        let mut pts = Vec::new();
        let mut normals = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
            let vals = vals.map_err(|e| TrajectoryError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if vals.len() != 5 {
                return Err(TrajectoryError::Parse {
                    line: i + 1,
                    msg: format!("expected 5 columns, found {}", vals.len()),
                });
            }
            pts.push([vals[0], vals[1], vals[2]]);
            normals.push([vals[3], vals[4]]);
        }
        let mut t = Trajectory::from_points(pts);
        t.normals = normals;
        Ok(t)
    }
}

/// Points offset by `w_r` along each normal: `(p + w n, p - w n)`, z copied.
pub fn offset_points(
    t: &Trajectory,
    w_r: f64,
) -> Result<(Vec<Point3>, Vec<Point3>), TrajectoryError> {
    if !t.has_normals() {
        return Err(TrajectoryError::MissingNormals);
    }
    let shift = |sign: f64| -> Vec<Point3> {
        t.waypoints
            .iter()
            .zip(&t.normals)
            .map(|(p, n)| [p[0] + sign * w_r * n[0], p[1] + sign * w_r * n[1], p[2]])
            .collect()
    };
    Ok((shift(1.0), shift(-1.0)))
}
