//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to the
//! real stdout (bypassing the harness capture) and then asserts.
//!
//! Tests share one lock so that the wall-clock budgets are measured without
//! interference from each other.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use impplan::costmap::{
    build_costmap, gaussian_filter, geometric_costmap, height_map, signed_distance, CostMap, HeightMap, SmoothingConfig,
};
use impplan::datagen::{build_reachability_graph, halton, sample_viewpoints, TrainingSample};
use impplan::envworld::{make_corridor, make_urban_toy, Environment2D, RobotPose, SensorConfig, TerrainPattern};
use impplan::evaluation::{compare_variants, draw_pairs, evaluate, EvalWorld, Observation, Outcome, Policy, RolloutConfig};
use impplan::grid::Grid;
use impplan::losses::{bce, collision_loss, goal_loss, height_loss, total_loss, traversability_loss, LossContext};
use impplan::planner::{plan, PlannerConfig, PlannerOutput, PlannerParams};
use impplan::semantics::{default_table, CostTable};
use impplan::training::{sample_gradient, sample_loss, train, TrainConfig, TrainMaps};
use impplan::trajectory::{spline_interpolate, KeyPointSet, Point3};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: &str, pass: bool, detail: &str) {
    let line = format!("{} {criterion}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

struct Maps {
    env: Environment2D,
    cost: CostMap,
    geo: CostMap,
    height: HeightMap,
}

fn urban(seed: u64, table: &CostTable) -> Maps {
    let env = make_urban_toy(seed).unwrap();
    let cost = build_costmap(&env, table, &SmoothingConfig::default()).unwrap();
    let geo = geometric_costmap(&env, table, &SmoothingConfig::default()).unwrap();
    let height = height_map(&env);
    Maps { env, cost, geo, height }
}

impl Maps {
    fn world<'a>(&'a self, table: &'a CostTable) -> EvalWorld<'a> {
        EvalWorld {
            env: &self.env,
            table,
            semantic: &self.cost,
            geometric: &self.geo,
            height: &self.height,
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient correctness

/// Bilinear cell of a query point, without clamping, so leaving the hull also
/// counts as a change.
fn cell(m: &CostMap, x: f64, y: f64) -> (i64, i64) {
    let u = (x - m.origin[0]) / m.resolution - 0.5;
    let v = (y - m.origin[1]) / m.resolution - 0.5;
    (u.floor() as i64, v.floor() as i64)
}

/// Everything that selects a smooth branch of the loss: the bilinear cell of
/// every sampled point, the sign of each height error and the collision flag.
fn branch(ctx: &LossContext<'_>, pose: &RobotPose, k: &KeyPointSet) -> Vec<i64> {
    let t = ctx.world_trajectory(pose, k).unwrap();
    let mut sig = Vec::with_capacity(t.len() * 7 + 1);
    for (p, n) in t.waypoints.iter().zip(&t.normals) {
        for s in [0.0, 1.0, -1.0] {
            let (a, b) = cell(ctx.cost, p[0] + s * ctx.w_r * n[0], p[1] + s * ctx.w_r * n[1]);
            sig.push(a);
            sig.push(b);
        }
        let e = p[2] - ctx.height.sample(p[0], p[1]).value - ctx.h_r;
        sig.push(e.signum() as i64);
    }
    let collided = t.waypoints.iter().any(|p| ctx.cost.sample(p[0], p[1]).value >= ctx.obstacle_threshold);
    sig.push(collided as i64);
    sig
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

struct Instance {
    pose: RobotPose,
    keypoints: KeyPointSet,
    logit: f64,
    goal: Point3,
}

fn random_instance(rng: &mut ChaCha8Rng, maps: &Maps, ctx: &LossContext<'_>, starts: &[[f64; 2]]) -> Instance {
    let s = starts[rng.gen_range(0..starts.len())];
    let pose = RobotPose::new(s[0], s[1], rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI));
    let mut x = 0.0;
    let mut y = 0.0;
    let points = (0..5)
        .map(|_| {
            x += rng.gen_range(0.5..1.5);
            y += rng.gen_range(-0.5..0.5);
            [x, y, ctx.h_r + rng.gen_range(-0.2..0.2)]
        })
        .collect();
    let (w, h) = (maps.env.width(), maps.env.height());
    let r = rng.gen_range(2.0..8.0);
    let a: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let gx = (s[0] + r * a.cos()).clamp(0.5, w - 0.5);
    let gy = (s[1] + r * a.sin()).clamp(0.5, h - 0.5);
    Instance {
        pose,
        keypoints: KeyPointSet::new(points).unwrap(),
        logit: rng.gen_range(-3.0..3.0),
        goal: ctx.goal_world(gx, gy),
    }
}

/// Tiny network used for the parameter-gradient check.
fn tiny_planner() -> (PlannerConfig, SensorConfig) {
    let sensor = SensorConfig {
        n_rays: 8,
        ..SensorConfig::default()
    };
    let cfg = PlannerConfig {
        c_i: 3,
        c_g: 3,
        m: 2,
        n_k: 5,
        n_rays: 8,
        sem_rows: 1 + sensor.ground_rows,
        enc_hidden: 6,
        trunk_hidden: [8, 6],
    };
    (cfg, sensor)
}

fn theta_branch(params: &PlannerParams, s: &TrainingSample, ctx: &LossContext<'_>) -> (Vec<bool>, Vec<i64>) {
    let (out, fwd) = plan(&s.depth, &s.semantic, s.goal_robot(ctx.height), params).unwrap();
    (fwd.graph.relu_pattern(), branch(ctx, &s.pose, &out.keypoints))
}

#[test]
fn gradient_correctness() {
    let _guard = serial();
    let t0 = Instant::now();
    let table = default_table();
    let h = 1e-4;
    let tol = 1e-4;

    // Keypoint gradients on 50 random instances.
    let maps: Vec<Maps> = (0..5).map(|s| urban(s, &table)).collect();
    let starts: Vec<Vec<[f64; 2]>> = maps
        .iter()
        .map(|m| sample_viewpoints(&m.env, &table, &m.cost, 60, 1.5).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_kp, mut checked, mut excluded) = (0.0f64, 0usize, 0usize);
    for i in 0..50 {
        let m = &maps[i % maps.len()];
        let ctx = LossContext::new(&m.cost, &m.height, 1.75);
        let inst = random_instance(&mut rng, m, &ctx, &starts[i % maps.len()]);
        let base = total_loss(&ctx, &inst.pose, &inst.keypoints, inst.logit, inst.goal).unwrap();
        let sig = branch(&ctx, &inst.pose, &inst.keypoints);
        let (mut an, mut fd) = (Vec::new(), Vec::new());
        for k in 0..inst.keypoints.len() {
            for d in 0..3 {
                let shifted = |delta: f64| {
                    let mut kp = inst.keypoints.clone();
                    kp.points[k][d] += delta;
                    kp
                };
                let (kp_p, kp_m) = (shifted(h), shifted(-h));
                if branch(&ctx, &inst.pose, &kp_p) != sig || branch(&ctx, &inst.pose, &kp_m) != sig {
                    excluded += 1;
                    continue;
                }
                let lp = total_loss(&ctx, &inst.pose, &kp_p, inst.logit, inst.goal).unwrap().total;
                let lm = total_loss(&ctx, &inst.pose, &kp_m, inst.logit, inst.goal).unwrap().total;
                an.push(base.grad_keypoints[k][d]);
                fd.push((lp - lm) / (2.0 * h));
                checked += 1;
            }
        }
        // The logit enters only through the smooth cross-entropy.
        let lp = total_loss(&ctx, &inst.pose, &inst.keypoints, inst.logit + h, inst.goal).unwrap().total;
        let lm = total_loss(&ctx, &inst.pose, &inst.keypoints, inst.logit - h, inst.goal).unwrap().total;
        an.push(base.grad_logit);
        fd.push((lp - lm) / (2.0 * h));
        worst_kp = worst_kp.max(rel_err(&an, &fd));
    }

    // End-to-end parameter gradients on a tiny network.
    let (cfg, sensor) = tiny_planner();
    let m = &maps[0];
    let rc = RolloutConfig {
        sensor,
        ..RolloutConfig::default()
    };
    let samples = draw_pairs(&m.world(&table), 4, &rc, 3).unwrap();
    let ctx = LossContext::new(&m.cost, &m.height, 1.75);
    let (mut worst_theta, mut theta_checked, mut theta_excluded) = (0.0f64, 0usize, 0usize);
    for (i, s) in samples.iter().enumerate() {
        let mut params = PlannerParams::init(cfg, 0.5, 100 + i as u64).unwrap();
        let (_, grads) = sample_gradient(&params, s, &ctx).unwrap();
        let sig = theta_branch(&params, s, &ctx);
        let (mut an, mut fd) = (Vec::new(), Vec::new());
        for b in 0..params.tensors().len() {
            for j in 0..params.tensors()[b].len() {
                let orig = params.tensors()[b].data()[j];
                params.tensors_mut()[b].data_mut()[j] = orig + h;
                let same_p = theta_branch(&params, s, &ctx) == sig;
                let lp = sample_loss(&params, s, &ctx).unwrap().total;
                params.tensors_mut()[b].data_mut()[j] = orig - h;
                let same_m = theta_branch(&params, s, &ctx) == sig;
                let lm = sample_loss(&params, s, &ctx).unwrap().total;
                params.tensors_mut()[b].data_mut()[j] = orig;
                if !(same_p && same_m) {
                    theta_excluded += 1;
                    continue;
                }
                an.push(grads[b].data()[j]);
                fd.push((lp - lm) / (2.0 * h));
                theta_checked += 1;
            }
        }
        worst_theta = worst_theta.max(rel_err(&an, &fd));
    }

    let elapsed = t0.elapsed();
    let pass = worst_kp < tol && worst_theta < tol && elapsed < Duration::from_secs(60);
    report(
        "gradient correctness",
        pass,
        &format!(
            "keypoint rel err {worst_kp:.2e} ({checked} coords, {excluded} on cell/sign/flag boundaries excluded); \
             parameter rel err {worst_theta:.2e} ({theta_checked} coords, {theta_excluded} on relu/cell boundaries excluded); \
             {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Costmap pipeline

fn direct_gaussian(g: &Grid<f64>, sigma: f64) -> Grid<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    let (rows, cols) = g.dims();
    Grid::from_fn(rows, cols, |r, c| {
        let mut acc = 0.0;
        for (a, wa) in (-radius..=radius).zip(&w) {
            for (b, wb) in (-radius..=radius).zip(&w) {
                let rr = (r as i64 + a).clamp(0, rows as i64 - 1) as usize;
                let cc = (c as i64 + b).clamp(0, cols as i64 - 1) as usize;
                acc += wa * wb * g.get(rr, cc);
            }
        }
        acc / (total * total)
    })
}

fn brute_signed_distance(mask: &Grid<bool>, res: f64) -> Grid<f64> {
    let (rows, cols) = mask.dims();
    Grid::from_fn(rows, cols, |r, c| {
        let me = *mask.get(r, c);
        let mut best = i64::MAX;
        for rr in 0..rows {
            for cc in 0..cols {
                if *mask.get(rr, cc) != me {
                    let (dr, dc) = (rr as i64 - r as i64, cc as i64 - c as i64);
                    best = best.min(dr * dr + dc * dc);
                }
            }
        }
        let d = (best as f64).sqrt() * res;
        if me {
            d
        } else {
            -d
        }
    })
}

#[test]
fn costmap_pipeline() {
    let _guard = serial();
    let t0 = Instant::now();
    let table = default_table();

    let mut const_bad = Vec::new();
    for class in table.classes() {
        let env = Environment2D::new(6.0, 4.0, 0.2, &class.name).unwrap();
        let m = build_costmap(&env, &table, &SmoothingConfig::default()).unwrap();
        let want = table.cost_of(&class.name).unwrap();
        if m.values.data().iter().any(|&v| v != want) {
            const_bad.push(class.name.clone());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_filter = 0.0f64;
    for sigma in [0.7, 1.0, 2.0, 3.0] {
        for _ in 0..3 {
            let (rows, cols) = (rng.gen_range(5..30), rng.gen_range(5..30));
            let g = Grid::from_fn(rows, cols, |_, _| rng.gen_range(0.0..2.0));
            let a = gaussian_filter(&g, sigma);
            let b = direct_gaussian(&g, sigma);
            for (x, y) in a.data().iter().zip(b.data()) {
                worst_filter = worst_filter.max((x - y).abs());
            }
        }
    }

    let mut edt_bad = 0;
    for i in 0..20 {
        let p = 0.1 + 0.04 * i as f64;
        let mask = Grid::from_fn(20, 20, |_, _| rng.gen_bool(p));
        if signed_distance(&mask, 0.2) != brute_signed_distance(&mask, 0.2) {
            edt_bad += 1;
        }
    }

    let elapsed = t0.elapsed();
    let pass = const_bad.is_empty() && worst_filter <= 1e-9 && edt_bad == 0 && elapsed < Duration::from_secs(30);
    report(
        "costmap pipeline",
        pass,
        &format!(
            "{} classes, inexact {:?}; filter max diff {worst_filter:.2e}; signed distance mismatches {edt_bad}/20; {:.1}s",
            table.classes().len(),
            const_bad,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Loss identities

fn flat_field(rows: usize, cols: usize, v: f64) -> CostMap {
    CostMap::new(Grid::filled(rows, cols, v), 0.2, [0.0, 0.0])
}

#[test]
fn loss_identities() {
    let _guard = serial();
    let kp = |pts: Vec<Point3>| KeyPointSet::new(pts).unwrap();
    let path = spline_interpolate([1.0, 1.0, 0.5], &kp(vec![[2.0, 1.5, 0.5], [3.0, 1.0, 0.5], [4.0, 2.0, 0.5]]), 10).unwrap();
    let end = *path.waypoints.last().unwrap();

    let at_goal = goal_loss(&path, end).0;
    let e1 = std::f64::consts::E - 1.0;
    let at_e1 = goal_loss(&path, [end[0] + e1 * 0.6, end[1] + e1 * 0.8, end[2]]).0;
    let goal_ok = at_goal.abs() <= 1e-12 && (at_e1 - 1.0).abs() <= 1e-12;

    let mut trav_worst = 0.0f64;
    let mut with_normals = path.clone();
    with_normals.fill_normals().unwrap();
    for c in [0.0, 0.37, 1.0, 1.5, 2.0] {
        let m = flat_field(40, 40, c);
        let v = traversability_loss(&with_normals, &m, 0.5).unwrap().0;
        trav_worst = trav_worst.max((v - c).abs());
    }
    let trav_ok = trav_worst <= 1e-9;

    let coll = collision_loss(&with_normals, &flat_field(40, 40, 0.0), 0.5, 1.75).value;
    let bce_ok = (coll - std::f64::consts::LN_2).abs() <= 1e-12 && (bce(0.5, 1.0) - std::f64::consts::LN_2).abs() <= 1e-12;

    // Linear ramp z = 0.1 x + 0.05 y; a path whose control points ride h_r
    // above it stays on the plane because spline weights sum to one.
    let mut env = Environment2D::new(8.0, 6.0, 0.2, "floor").unwrap();
    for r in 0..env.rows() {
        for c in 0..env.cols() {
            let p = env.cell_center(r, c);
            env.set_height(r, c, 0.1 * p[0] + 0.05 * p[1]);
        }
    }
    let hm = height_map(&env);
    let plane = |x: f64, y: f64| 0.1 * x + 0.05 * y + 0.5;
    let ctrl = [[2.0, 2.5], [3.5, 3.0], [5.0, 2.0], [6.0, 4.0]];
    let ramp_path = spline_interpolate(
        [1.0, 2.0, plane(1.0, 2.0)],
        &kp(ctrl.iter().map(|p| [p[0], p[1], plane(p[0], p[1])]).collect()),
        10,
    )
    .unwrap();
    let ramp = height_loss(&ramp_path, &hm, 0.5).0;
    let height_ok = ramp.abs() <= 1e-9;

    let pass = goal_ok && trav_ok && bce_ok && height_ok;
    report(
        "loss identities",
        pass,
        &format!(
            "goal at coincidence {at_goal:.1e}, at e-1 {at_e1:.15}; traversability max dev {trav_worst:.1e}; \
             bce(0.5) {coll:.15}; ramp height loss {ramp:.1e}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Halton and reachability

fn oracle_max(m: &CostMap, a: [f64; 2], b: [f64; 2], step: f64) -> f64 {
    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let n = (len / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            m.sample(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])).value
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn halton_and_reachability() {
    let _guard = serial();
    let halton_ok = (1..=5).map(|i| halton(i, 2)).collect::<Vec<_>>() == vec![0.5, 0.25, 0.75, 0.125, 0.625];

    let table = default_table();
    let thr = 1.75;
    let (mut pairs, mut boundary, mut mismatches) = (0usize, 0usize, Vec::new());
    for inst in 0..20u64 {
        let env = make_urban_toy(inst).unwrap();
        let m = build_costmap(&env, &table, &SmoothingConfig::default()).unwrap();
        let step = env.resolution() / 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(500 + inst);
        let points: Vec<[f64; 2]> = (0..30)
            .map(|_| [rng.gen_range(0.0..env.width()), rng.gen_range(0.0..env.height())])
            .collect();
        let g = build_reachability_graph(&points, &m, thr);
        for u in 0..points.len() {
            for v in u + 1..points.len() {
                let max = oracle_max(&m, points[u], points[v], step);
                if (max - thr).abs() <= 1e-6 {
                    boundary += 1;
                    continue;
                }
                pairs += 1;
                if (max < thr) != g.has_edge(u, v) {
                    mismatches.push((inst, u, v, max));
                }
            }
        }
    }
    let pass = halton_ok && mismatches.is_empty();
    report(
        "halton and reachability",
        pass,
        &format!(
            "halton base 2 prefix exact: {halton_ok}; {} of {pairs} segments disagree with the 10x-finer oracle \
             ({boundary} boundary cases excluded){}",
            mismatches.len(),
            if mismatches.is_empty() {
                String::new()
            } else {
                format!(", first (instance, u, v, oracle max): {:?}", &mismatches[..mismatches.len().min(3)])
            }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Training sanity

#[test]
fn training_sanity() {
    let _guard = serial();
    let t0 = Instant::now();
    let table = default_table();

    // Overfit one corridor sample.
    let env = make_corridor(12.0, 3.0, &TerrainPattern::Uniform("floor".into()), 0).unwrap();
    let cost = build_costmap(&env, &table, &SmoothingConfig::default()).unwrap();
    let height = height_map(&env);
    let maps = TrainMaps {
        cost: &cost,
        height: &height,
    };
    let cy = env.height() / 2.0;
    let pose = RobotPose::new(1.5, cy, 0.0);
    let sensor = SensorConfig::default();
    let (depth, semantic) = impplan::envworld::raycast(&env, &table, &pose, &sensor).unwrap();
    let ctx0 = LossContext::new(&cost, &height, 1.75);
    let sample = TrainingSample {
        pose,
        depth,
        semantic,
        goal: ctx0.goal_world(8.0, cy),
    };
    let cfg = TrainConfig {
        max_epochs: 500,
        patience: 500,
        lr_step: 500,
        ..TrainConfig::default()
    };
    let p0 = PlannerParams::init(PlannerConfig::default(), cfg.h_r, 0).unwrap();
    let (best, hist) = train(std::slice::from_ref(&sample), &maps, &p0, &cfg).unwrap();
    let ctx = cfg.loss_context(&maps);
    let fit = sample_loss(&best, &sample, &ctx).unwrap();
    let overfit_ok = fit.goal < 0.1;

    // Descent checks: one raw step against the sample's own gradient.
    let m = urban(0, &table);
    let samples = draw_pairs(&m.world(&table), 100, &RolloutConfig::default(), 77).unwrap();
    let ctx = LossContext::new(&m.cost, &m.height, 1.75);
    let mut descents = 0;
    for (i, s) in samples.iter().enumerate() {
        let mut params = PlannerParams::init(PlannerConfig::default(), 0.5, i as u64).unwrap();
        let (b0, grads) = sample_gradient(&params, s, &ctx).unwrap();
        for (t, g) in params.tensors_mut().iter_mut().zip(&grads) {
            for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
                *w -= 1e-4 * d;
            }
        }
        if sample_loss(&params, s, &ctx).unwrap().total < b0.total {
            descents += 1;
        }
    }

    let elapsed = t0.elapsed();
    let pass = overfit_ok && descents >= 98 && elapsed < Duration::from_secs(120);
    report(
        "training sanity",
        pass,
        &format!(
            "overfit goal loss {:.4} after {} epochs; descent in {descents}/100 steps; {:.1}s",
            fit.goal,
            hist.stop_epoch,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Semantic vs geometric comparison

struct Fearful;

impl Policy for Fearful {
    fn act(&self, obs: &Observation<'_>) -> Result<PlannerOutput, impplan::evaluation::EvalError> {
        let g = obs.goal_robot;
        let points = (1..=5).map(|k| [g[0] * k as f64 / 5.0, g[1] * k as f64 / 5.0, 0.5]).collect();
        let logit = (0.98f64 / 0.02).ln();
        Ok(PlannerOutput {
            keypoints: KeyPointSet::new(points).unwrap(),
            logit,
            mu: impplan::losses::sigmoid(logit),
        })
    }
}

#[test]
fn semantic_beats_geometric() {
    let _guard = serial();
    let t0 = Instant::now();
    let table = default_table();
    let m = urban(0, &table);
    let world = m.world(&table);
    let rc = RolloutConfig::default();
    let samples = draw_pairs(&world, 2000, &rc, 1000).unwrap();
    let c = compare_variants(&samples, &world, &[0, 1, 2], PlannerConfig::default(), &TrainConfig::default(), &rc, 100).unwrap();
    let _ = std::io::stdout().lock().write_all(c.to_table().as_bytes());

    let reduction = -c.relative_sem_change;
    let a_ok = reduction >= 0.15;
    let b_ok = c.semantic_goal_reached >= 0.6;

    let gated = evaluate(&Fearful, &world, 100, &rc, 5).unwrap();
    let c_ok = gated.report.rejected_by_gate == 1.0
        && gated.rollouts.iter().all(|r| r.outcome == Outcome::GateStopped && r.path.len() == 1);

    let elapsed = t0.elapsed();
    let pass = a_ok && b_ok && c_ok && elapsed < Duration::from_secs(30 * 60);
    report(
        "semantic vs geometric",
        pass,
        &format!(
            "(a) sem_loss semantic {:.4} vs geometric {:.4}, reduction {:.1}% (need >= 15%): {}; \
             (b) semantic goal_reached {:.3} (need >= 0.6): {}; (c) mu=0.98 stub rejected in {:.0}% of rollouts: {}; {:.0}s",
            c.semantic_sem_loss,
            c.geometric_sem_loss,
            100.0 * reduction,
            if a_ok { "ok" } else { "not met" },
            c.semantic_goal_reached,
            if b_ok { "ok" } else { "not met" },
            100.0 * gated.report.rejected_by_gate,
            if c_ok { "ok" } else { "not met" },
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Determinism

struct Artifacts {
    dataset: Vec<u8>,
    checkpoint: Vec<u8>,
    history: String,
    report: String,
}

fn pipeline_once() -> Artifacts {
    let table = default_table();
    let m = urban(1, &table);
    let world = m.world(&table);
    let rc = RolloutConfig::default();
    let samples = draw_pairs(&world, 120, &rc, 42).unwrap();
    let dataset = impplan::datagen::Dataset {
        env_sha256: m.env.content_hash(),
        sensor: rc.sensor,
        samples: samples.clone(),
    }
    .to_bytes()
    .unwrap();
    let cfg = TrainConfig {
        max_epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let p0 = PlannerParams::init(PlannerConfig::default(), cfg.h_r, 9).unwrap();
    let maps = TrainMaps {
        cost: &m.cost,
        height: &m.height,
    };
    let (params, hist) = train(&samples, &maps, &p0, &cfg).unwrap();
    let report = evaluate(&params, &world, 10, &rc, 9).unwrap().report.to_json();
    Artifacts {
        dataset,
        checkpoint: params.to_bytes(),
        history: hist.to_csv(),
        report,
    }
}

#[test]
fn determinism() {
    let _guard = serial();
    let a = pipeline_once();
    let b = pipeline_once();
    let same = [
        ("dataset", a.dataset == b.dataset),
        ("checkpoint", a.checkpoint == b.checkpoint),
        ("history", a.history == b.history),
        ("eval report", a.report == b.report),
    ];
    let pass = same.iter().all(|(_, s)| *s);
    let detail: Vec<String> = same
        .iter()
        .map(|(n, s)| format!("{n} {}", if *s { "identical" } else { "differs" }))
        .collect();
    report("determinism", pass, &detail.join(", "));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// CLI pipeline

fn run_cli(dir: &Path, args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_impplan"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn impplan");
    (out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn cli_pipeline() {
    let _guard = serial();
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let steps: [&[&str]; 7] = [
        &["gen-env", "--kind", "urban", "--seed", "0", "--out", "env.json"],
        &["build-costmap", "--env", "env.json", "--out", "cost.bin"],
        &["gen-data", "--env", "env.json", "--n", "200", "--seed", "1", "--out", "data.bin"],
        &["train", "--data", "data.bin", "--env", "env.json", "--epochs", "5", "--out", "model.ipnn", "--log", "history.csv"],
        &["eval", "--model", "model.ipnn", "--env", "env.json", "--n", "20", "--seed", "2", "--report", "report.json"],
        &["plan", "--model", "model.ipnn", "--env", "env.json", "--x", "2", "--y", "2", "--goal-x", "6", "--goal-y", "3", "--out", "traj.txt"],
        &["plot-path", "--env", "env.json", "--traj", "traj.txt", "--out", "traj.svg"],
    ];
    let mut failed = None;
    for args in steps {
        let (ok, err) = run_cli(dir.path(), args);
        if !ok {
            failed = Some(format!("{} failed: {}", args[0], err.trim()));
            break;
        }
    }
    let elapsed = t0.elapsed();
    let pass = failed.is_none() && elapsed < Duration::from_secs(300);
    report(
        "cli pipeline",
        pass,
        &match &failed {
            Some(f) => f.clone(),
            None => format!("gen-env, build-costmap, gen-data, train, eval, plan, plot-path all exited 0 in {:.1}s", elapsed.as_secs_f64()),
        },
    );
    assert!(pass);
}
