//! Two-stream planning network.
//!
//! Depth and semantic scans each pass through their own MLP encoder into a
//! `(C_I, M)` feature; the goal is mapped linearly to `(C_G, M)`. The three are
//! stacked along the channel axis, flattened into a shared trunk, and read out
//! by a keypoint head (cumulative offsets) and a collision-logit head.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::envworld::{DepthScan, SemanticScan};
use crate::losses::sigmoid;
use crate::trajectory::{KeyPointSet, Point3, TrajectoryError};

const MAGIC: &[u8; 5] = b"IPNN1";

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("invalid planner config: {0}")]
    Config(String),
    #[error("{what} has {found} entries, expected {expected}")]
    InputLength {
        what: &'static str,
        found: usize,
        expected: usize,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub c_i: usize,
    pub c_g: usize,
    pub m: usize,
    pub n_k: usize,
    pub n_rays: usize,
    /// Semantic scan rows: the first-hit row plus the ground rows.
    pub sem_rows: usize,
    pub enc_hidden: usize,
    pub trunk_hidden: [usize; 2],
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            c_i: 16,
            c_g: 4,
            m: 8,
            n_k: 5,
            n_rays: 64,
            sem_rows: 5,
            enc_hidden: 128,
            trunk_hidden: [256, 128],
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let sizes = [self.c_i, self.m, self.n_k, self.n_rays, self.sem_rows, self.enc_hidden, self.trunk_hidden[0], self.trunk_hidden[1]];
        if self.c_g < 3 || sizes.contains(&0) {
            return Err(PlannerError::Config(format!("{self:?} (C_G must be >= 3, sizes > 0)")));
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        (2 * self.c_i + self.c_g) * self.m
    }

    /// Block names with their shapes, in storage order.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (h, f, t) = (self.enc_hidden, self.c_i * self.m, self.trunk_hidden);
        vec![
            ("depth.w1", vec![h, self.n_rays]),
            ("depth.b1", vec![h]),
            ("depth.w2", vec![f, h]),
            ("depth.b2", vec![f]),
            ("sem.w1", vec![h, 3 * self.n_rays * self.sem_rows]),
            ("sem.b1", vec![h]),
            ("sem.w2", vec![f, h]),
            ("sem.b2", vec![f]),
            ("goal.w", vec![self.c_g * self.m, 3]),
            ("goal.b", vec![self.c_g * self.m]),
            ("trunk.w1", vec![t[0], self.fused_dim()]),
            ("trunk.b1", vec![t[0]]),
            ("trunk.w2", vec![t[1], t[0]]),
            ("trunk.b2", vec![t[1]]),
            ("kp.w", vec![3 * self.n_k, t[1]]),
            ("kp.b", vec![3 * self.n_k]),
            ("coll.w", vec![1, t[1]]),
            ("coll.b", vec![1]),
        ]
    }
}

// Indices into `PlannerParams::tensors`, matching `layout`.
const DEPTH: usize = 0;
const SEM: usize = 4;
const GOAL_W: usize = 8;
const GOAL_B: usize = 9;
const TRUNK: usize = 10;
const KP_W: usize = 14;
const KP_B: usize = 15;
const COLL_W: usize = 16;
const COLL_B: usize = 17;

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerParams {
    config: PlannerConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerOutput {
    pub keypoints: KeyPointSet,
    pub logit: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateDecision {
    Execute,
    Reject,
}

/// Executes only paths whose collision probability is strictly below `delta_mu`.
pub fn gate(output: &PlannerOutput, delta_mu: f64) -> GateDecision {
    if output.mu < delta_mu {
        GateDecision::Execute
    } else {
        GateDecision::Reject
    }
}

impl PlannerParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` init. The keypoint bias
    /// starts as a straight line of 1 m steps at base height `h_r`.
    pub fn init(config: PlannerConfig, h_r: f64, seed: u64) -> Result<Self, PlannerError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let fan_in = if shape.len() == 2 { shape[1] } else { tensors.last().map_or(1, |w: &Tensor| w.shape()[1]) };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            names.push(name.to_string());
            tensors.push(Tensor::new(shape, data)?);
        }
        let kp_b = tensors[KP_B].data_mut();
        for k in 0..config.n_k {
            kp_b[3 * k] = 1.0;
            kp_b[3 * k + 1] = 0.0;
            kp_b[3 * k + 2] = if k == 0 { h_r } else { 0.0 };
        }
        tensors[COLL_B].data_mut()[0] = 0.0;
        Ok(PlannerParams { config, names, tensors })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [c.c_i, c.c_g, c.m, c.n_k, c.n_rays, self.tensors.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PlannerError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(PlannerError::Format("missing IPNN1 magic".into()));
        }
        let header: Vec<usize> = (0..6).map(|_| r.u32()).collect::<Result<_, _>>()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for _ in 0..header[5] {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| PlannerError::Format(e.to_string()))?;
            let ndim = r.u32()?;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32()).collect::<Result<_, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(8 * n)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(PlannerError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let dim = |name: &str, axis: usize| -> Result<usize, PlannerError> {
            let i = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| PlannerError::Format(format!("missing block {name}")))?;
            tensors[i]
                .shape()
                .get(axis)
                .copied()
                .ok_or_else(|| PlannerError::Format(format!("block {name} has too few axes")))
        };
        let config = PlannerConfig {
            c_i: header[0],
            c_g: header[1],
            m: header[2],
            n_k: header[3],
            n_rays: header[4],
            sem_rows: dim("sem.w1", 1)? / (3 * header[4]).max(1),
            enc_hidden: dim("depth.w1", 0)?,
            trunk_hidden: [dim("trunk.w1", 0)?, dim("trunk.w2", 0)?],
        };
        config.validate()?;
        let layout = config.layout();
        if layout.len() != names.len() {
            return Err(PlannerError::Format(format!("expected {} blocks, found {}", layout.len(), names.len())));
        }
        for ((want, shape), (name, t)) in layout.iter().zip(names.iter().zip(&tensors)) {
            if want != name || shape.as_slice() != t.shape() {
                return Err(PlannerError::Format(format!(
                    "block {name} {:?} where {want} {shape:?} was expected",
                    t.shape()
                )));
            }
        }
        Ok(PlannerParams { config, names, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), PlannerError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PlannerError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], PlannerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            PlannerError::Format(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, PlannerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Network input vectors.
fn depth_input(scan: &DepthScan, cfg: &PlannerConfig) -> Result<Tensor, PlannerError> {
    if scan.ranges.len() != cfg.n_rays {
        return Err(PlannerError::InputLength {
            what: "depth scan",
            found: scan.ranges.len(),
            expected: cfg.n_rays,
        });
    }
    Ok(Tensor::vector(scan.ranges.iter().map(|&r| r as f64 / scan.max_range).collect()))
}

fn semantic_input(scan: &SemanticScan, cfg: &PlannerConfig) -> Result<Tensor, PlannerError> {
    let found = scan.colors.len() + scan.ground.len();
    if scan.colors.len() != cfg.n_rays || found != cfg.n_rays * cfg.sem_rows {
        return Err(PlannerError::InputLength {
            what: "semantic scan",
            found,
            expected: cfg.n_rays * cfg.sem_rows,
        });
    }
    Ok(Tensor::vector(
        scan.colors.iter().chain(&scan.ground).flatten().map(|&c| c as f64 / 255.0).collect(),
    ))
}

/// A recorded forward pass, ready for gradient injection.
pub struct Forward<'a> {
    pub graph: Graph<'a>,
    pub depth_feat: NodeId,
    pub sem_feat: NodeId,
    pub goal_feat: NodeId,
    pub fused: NodeId,
    pub keypoints: NodeId,
    pub logit: NodeId,
}

impl Forward<'_> {
    /// Backpropagates `dL/dkeypoints` and `dL/dlogit`, returning one gradient
    /// tensor per parameter block.
    pub fn backward(mut self, params: &PlannerParams, grad_kp: &[Point3], grad_logit: f64) -> Result<Vec<Tensor>, PlannerError> {
        let n_k = params.config.n_k;
        if grad_kp.len() != n_k {
            return Err(PlannerError::InputLength {
                what: "keypoint gradient",
                found: grad_kp.len(),
                expected: n_k,
            });
        }
        let gk = Tensor::new(vec![n_k, 3], grad_kp.iter().flatten().copied().collect())?;
        self.graph.inject_external_gradient(self.keypoints, &gk)?;
        self.graph.inject_external_gradient(self.logit, &Tensor::scalar(grad_logit))?;
        self.graph.backward()?;
        Ok(self
            .graph
            .into_param_grads(params.tensors.len())
            .into_iter()
            .zip(&params.tensors)
            .map(|(g, t)| g.unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    }
}

fn encoder<'a>(g: &mut Graph<'a>, params: &'a PlannerParams, base: usize, x: Tensor) -> Result<NodeId, PlannerError> {
    let cfg = &params.config;
    let t = &params.tensors;
    let x = g.input(x);
    let (w1, b1) = (g.param(base, &t[base]), g.param(base + 1, &t[base + 1]));
    let h = g.linear(w1, b1, x)?;
    let h = g.relu(h)?;
    let (w2, b2) = (g.param(base + 2, &t[base + 2]), g.param(base + 3, &t[base + 3]));
    let f = g.linear(w2, b2, h)?;
    let f = g.relu(f)?;
    Ok(g.reshape(f, &[cfg.c_i, cfg.m])?)
}

fn goal_embedding<'a>(g: &mut Graph<'a>, params: &'a PlannerParams, goal: Point3) -> Result<NodeId, PlannerError> {
    let cfg = &params.config;
    let x = g.input(Tensor::vector(goal.to_vec()));
    let w = g.param(GOAL_W, &params.tensors[GOAL_W]);
    let b = g.param(GOAL_B, &params.tensors[GOAL_B]);
    let e = g.linear(w, b, x)?;
    Ok(g.reshape(e, &[cfg.c_g, cfg.m])?)
}

pub fn encode_depth(scan: &DepthScan, params: &PlannerParams) -> Result<Tensor, PlannerError> {
    let x = depth_input(scan, &params.config)?;
    let mut g = Graph::new();
    let f = encoder(&mut g, params, DEPTH, x)?;
    Ok(g.value(f).clone())
}

pub fn encode_semantic(scan: &SemanticScan, params: &PlannerParams) -> Result<Tensor, PlannerError> {
    let x = semantic_input(scan, &params.config)?;
    let mut g = Graph::new();
    let f = encoder(&mut g, params, SEM, x)?;
    Ok(g.value(f).clone())
}

pub fn embed_goal(goal: Point3, params: &PlannerParams) -> Result<Tensor, PlannerError> {
    let mut g = Graph::new();
    let f = goal_embedding(&mut g, params, goal)?;
    Ok(g.value(f).clone())
}

/// Forward pass; `goal` is in the robot frame.
pub fn plan<'a>(
    depth: &DepthScan,
    semantic: &SemanticScan,
    goal: Point3,
    params: &'a PlannerParams,
) -> Result<(PlannerOutput, Forward<'a>), PlannerError> {
    let cfg = &params.config;
    let t = &params.tensors;
    let dx = depth_input(depth, cfg)?;
    let sx = semantic_input(semantic, cfg)?;
    let mut g = Graph::new();
    let depth_feat = encoder(&mut g, params, DEPTH, dx)?;
    let sem_feat = encoder(&mut g, params, SEM, sx)?;
    let goal_feat = goal_embedding(&mut g, params, goal)?;
    let fused = g.concat(&[depth_feat, sem_feat, goal_feat], 0)?;
    let flat = g.reshape(fused, &[cfg.fused_dim()])?;

    let mut h = flat;
    for layer in 0..2 {
        let w = g.param(TRUNK + 2 * layer, &t[TRUNK + 2 * layer]);
        let b = g.param(TRUNK + 2 * layer + 1, &t[TRUNK + 2 * layer + 1]);
        h = g.linear(w, b, h)?;
        h = g.relu(h)?;
    }

    let (kw, kb) = (g.param(KP_W, &t[KP_W]), g.param(KP_B, &t[KP_B]));
    let deltas = g.linear(kw, kb, h)?;
    let deltas = g.reshape(deltas, &[cfg.n_k, 3])?;
    let lower = Tensor::new(
        vec![cfg.n_k, cfg.n_k],
        (0..cfg.n_k * cfg.n_k).map(|i| if i % cfg.n_k <= i / cfg.n_k { 1.0 } else { 0.0 }).collect(),
    )?;
    let lower = g.input(lower);
    let keypoints = g.matmul(lower, deltas)?;

    let (cw, cb) = (g.param(COLL_W, &t[COLL_W]), g.param(COLL_B, &t[COLL_B]));
    let logit = g.linear(cw, cb, h)?;

    let kv = g.value(keypoints);
    let points = (0..cfg.n_k).map(|k| [kv.at(k, 0), kv.at(k, 1), kv.at(k, 2)]).collect();
    let lv = g.value(logit).data()[0];
    let out = PlannerOutput {
        keypoints: KeyPointSet::new(points)?,
        logit: lv,
        mu: sigmoid(lv),
    };
    Ok((
        out,
        Forward {
            graph: g,
            depth_feat,
            sem_feat,
            goal_feat,
            fused,
            keypoints,
            logit,
        },
    ))
}
