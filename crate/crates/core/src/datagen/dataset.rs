//! `IPDS` dataset files.
//!
//! One JSON header line (`format`, `env_sha256`, `sensor`, `count`) followed
//! by `count` little-endian binary records: pose `x y yaw` as f64, `n_rays`
//! ranges as f32, `n_rays` first-hit RGB triples, `ground_rows * n_rays` ground
//! RGB triples, goal `x y z` as f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatagenError, TrainingSample};
use crate::envworld::{DepthScan, RobotPose, SemanticScan, SensorConfig};

const FORMAT: &str = "IPDS1";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Content hash of the environment the samples were rendered in.
    pub env_sha256: String,
    pub sensor: SensorConfig,
    pub samples: Vec<TrainingSample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    env_sha256: String,
    sensor: SensorConfig,
    count: usize,
}

impl Dataset {
    fn record_len(&self) -> usize {
        3 * 8 + self.sensor.n_rays * (4 + 3 * (1 + self.sensor.ground_rows)) + 3 * 8
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatagenError> {
        let header = Header {
            format: FORMAT.into(),
            env_sha256: self.env_sha256.clone(),
            sensor: self.sensor,
            count: self.samples.len(),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| DatagenError::Invalid(e.to_string()))?;
        out.push(b'\n');
        out.reserve(self.record_len() * self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let n = self.sensor.n_rays;
            if s.depth.ranges.len() != n || s.semantic.colors.len() != n || s.semantic.ground.len() != n * self.sensor.ground_rows {
                return Err(DatagenError::Invalid(format!("sample {i} does not have {n} rays")));
            }
            for v in [s.pose.x, s.pose.y, s.pose.yaw] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for r in &s.depth.ranges {
                out.extend_from_slice(&r.to_le_bytes());
            }
            for c in s.semantic.colors.iter().chain(&s.semantic.ground) {
                out.extend_from_slice(c);
            }
            for v in s.goal {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatagenError> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| DatagenError::Parse {
            location: "line 1".into(),
            msg: "missing header line".into(),
        })?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| DatagenError::Parse {
            location: "line 1".into(),
            msg: e.to_string(),
        })?;
        if header.format != FORMAT {
            return Err(DatagenError::Parse {
                location: "line 1".into(),
                msg: format!("unsupported format {:?}", header.format),
            });
        }
        let n = header.sensor.n_rays;
        let mut ds = Dataset {
            env_sha256: header.env_sha256,
            sensor: header.sensor,
            samples: Vec::with_capacity(header.count),
        };
        let rec = ds.record_len();
        let body = &bytes[nl + 1..];
        if body.len() != rec * header.count {
            let complete = body.len() / rec;
            return Err(DatagenError::Parse {
                location: format!("byte offset {}", nl + 1 + complete.min(header.count) * rec),
                msg: format!("expected {} records of {rec} bytes, found {} bytes", header.count, body.len()),
            });
        }
        let f64_at = |b: &[u8], o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        for r in body.chunks_exact(rec) {
            let pose = RobotPose {
                x: f64_at(r, 0),
                y: f64_at(r, 8),
                yaw: f64_at(r, 16),
            };
            let ranges = (0..n).map(|i| f32::from_le_bytes(r[24 + 4 * i..28 + 4 * i].try_into().unwrap())).collect();
            let c0 = 24 + 4 * n;
            let rgb = |i: usize| [r[c0 + 3 * i], r[c0 + 3 * i + 1], r[c0 + 3 * i + 2]];
            let n_ground = n * ds.sensor.ground_rows;
            let colors = (0..n).map(rgb).collect();
            let ground = (n..n + n_ground).map(rgb).collect();
            let g0 = c0 + 3 * (n + n_ground);
            ds.samples.push(TrainingSample {
                pose,
                depth: DepthScan {
                    ranges,
                    fov: ds.sensor.fov,
                    max_range: ds.sensor.max_range,
                },
                semantic: SemanticScan {
                    colors,
                    ground,
                    fov: ds.sensor.fov,
                },
                goal: [f64_at(r, g0), f64_at(r, g0 + 8), f64_at(r, g0 + 16)],
            });
        }
        Ok(ds)
    }
}

pub fn export_dataset(ds: &Dataset, path: &Path) -> Result<(), DatagenError> {
    std::fs::write(path, ds.to_bytes()?)?;
    Ok(())
}

pub fn import_dataset(path: &Path) -> Result<Dataset, DatagenError> {
    Dataset::from_bytes(&std::fs::read(path)?)
}
